use std::fs;

use ddgnet::base_model::Modality;
use ddgnet::corpus::{
    cosine, feature_path, generate, read_features, write_features, Corpus, CorpusSpec, SnippetOrigin,
};
use ddgnet::Error;

fn spec() -> CorpusSpec {
    CorpusSpec {
        num_train: 4,
        num_test: 3,
        seed: 21,
        ..CorpusSpec::default()
    }
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&spec()).unwrap();
    corpus.write(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.spec, corpus.spec);
    assert_eq!(back.videos.len(), corpus.videos.len());
    for (a, b) in corpus.videos.iter().zip(&back.videos) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.split, b.split);
        assert_eq!(a.segments, b.segments);
        assert_eq!(a.label, b.label);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.flow, b.flow);
    }
}

#[test]
fn same_seed_writes_identical_files() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&spec()).unwrap().write(d1.path()).unwrap();
    generate(&spec()).unwrap().write(d2.path()).unwrap();
    for name in [
        "corpus.cfg",
        "manifest.csv",
        "annotations.csv",
        "labels.csv",
        "features/video_0003.bin",
    ] {
        assert_eq!(
            fs::read(d1.path().join(name)).unwrap(),
            fs::read(d2.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn truncated_and_corrupt_feature_files_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&spec()).unwrap();
    let v = &corpus.videos[0];
    let path = dir.path().join("one.bin");
    write_features(&path, &v.rgb, &v.flow).unwrap();
    let (r, f) = read_features(&path).unwrap();
    assert_eq!((&r, &f), (&v.rgb, &v.flow));

    let bytes = fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        match read_features(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("cut at {cut}: expected a format error, got {other:?}"),
        }
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(read_features(&path), Err(Error::Format { offset: 0, .. })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    fs::write(&path, &trailing).unwrap();
    assert!(matches!(read_features(&path), Err(Error::Format { .. })));
}

#[test]
fn missing_feature_file_is_an_io_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate(&spec()).unwrap();
    corpus.write(dir.path()).unwrap();
    let gone = feature_path(dir.path(), "video_0002");
    fs::remove_file(&gone).unwrap();
    let err = Corpus::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert!(err.to_string().contains("video_0002"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn noiseless_action_snippets_sit_on_their_centroid() {
    let corpus = generate(&CorpusSpec {
        noise_scale: 0.0,
        boundary_width: 0,
        disagreement_prob: 0.0,
        ..spec()
    })
    .unwrap();
    let cents = corpus.centroids.as_ref().unwrap();
    let mut seen = 0;
    for (v, origins) in corpus.videos.iter().zip(&corpus.origins) {
        for (t, o) in origins.iter().enumerate() {
            if let SnippetOrigin::Action { category } = *o {
                for (m, f) in [(Modality::Rgb, &v.rgb), (Modality::Flow, &v.flow)] {
                    let c = cosine(&f.values.column(t), cents.category(m, category));
                    assert!((c - 1.0).abs() < 1e-12, "{} t={t}: {c}", v.id);
                }
                seen += 1;
            }
            assert!(!matches!(o, SnippetOrigin::Boundary { .. }));
        }
    }
    assert!(seen > 0);
}

#[test]
fn boundary_snippets_are_between_action_and_background() {
    let corpus = generate(&CorpusSpec {
        noise_scale: 0.0,
        disagreement_prob: 0.0,
        ..spec()
    })
    .unwrap();
    let cents = corpus.centroids.as_ref().unwrap();
    let mut seen = 0;
    for (v, origins) in corpus.videos.iter().zip(&corpus.origins) {
        for (t, o) in origins.iter().enumerate() {
            let SnippetOrigin::Boundary { category, alpha } = *o else {
                continue;
            };
            assert!(alpha > 0.0 && alpha < 1.0);
            for (m, f) in [(Modality::Rgb, &v.rgb), (Modality::Flow, &v.flow)] {
                let x = f.values.column(t);
                let (act, bg) = (cents.category(m, category), cents.background(m));
                // A pure action snippet has cosine 1 to its centroid and
                // cos(action, background) to the background; vice versa.
                let pure = cosine(act, bg);
                let (ca, cb) = (cosine(&x, act), cosine(&x, bg));
                assert!(ca > pure && ca < 1.0, "{} t={t}: action cosine {ca}", v.id);
                assert!(cb > pure && cb < 1.0, "{} t={t}: background cosine {cb}", v.id);
            }
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn every_label_has_a_segment_and_segments_are_disjoint() {
    let corpus = generate(&CorpusSpec {
        num_train: 30,
        ..spec()
    })
    .unwrap();
    for v in &corpus.videos {
        for c in v.label.categories() {
            assert!(v.segments.iter().any(|s| s.category == c));
        }
        for s in &v.segments {
            assert!(1 <= s.start && s.start <= s.end && s.end <= v.len());
            assert!(v.label.is_positive(s.category));
        }
        for w in v.segments.windows(2) {
            assert!(w[0].end < w[1].start);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        CorpusSpec {
            num_categories: 1,
            ..spec()
        },
        CorpusSpec {
            feature_dim: 3,
            ..spec()
        },
        CorpusSpec { snippets: 15, ..spec() },
        CorpusSpec {
            min_segments: 0,
            ..spec()
        },
        CorpusSpec {
            snippets: 16,
            min_segments: 4,
            max_segments: 4,
            ..spec()
        },
    ];
    for s in bad {
        let err = generate(&s).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
}
