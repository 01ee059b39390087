use ddgnet::base_model::{attention_forward, cas_forward, fuse_attention, suppress_cas, video_scores, BackboneConfig};
use ddgnet::checkpoint::encode_params;
use ddgnet::corpus::{generate, Corpus, CorpusSpec, Split, Video};
use ddgnet::evaluator::EvalConfig;
use ddgnet::graph::{GraphFlags, SnippetKind};
use ddgnet::model::Model;
use ddgnet::numerics::Tape;
use ddgnet::trainer::{grad_check, loss_and_grad, loss_value, total_loss, train, Adam, GradCheckInstance, TrainConfig};

fn small_corpus(num_train: usize, seed: u64) -> Corpus {
    generate(&CorpusSpec {
        num_train,
        num_test: 2,
        seed,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn backbone(c: &Corpus) -> BackboneConfig {
    BackboneConfig::new(c.spec.feature_dim, c.spec.num_categories)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let zero = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(total_loss(2.0, 0.4, 0.7, &zero), 2.0);
    let c = TrainConfig::default();
    assert_eq!(c.lambda1, 1.0);
    assert!((total_loss(2.0, 0.4, 0.0, &c) - 2.4).abs() < 1e-15);
    let once = total_loss(2.0, 0.4, 0.0, &c);
    let twice = total_loss(2.0, 0.8, 0.0, &c);
    assert!((twice - once - c.lambda1 * 0.4).abs() < 1e-15);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_logs() {
    let corpus = small_corpus(5, 3);
    let tr: Vec<&Video> = corpus.split(Split::Train).collect();
    let run = || train(backbone(&corpus), &tr, &[], &cfg(3), &EvalConfig::default(), |_| Ok(())).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(encode_params(&a.model.params), encode_params(&b.model.params));
    assert_eq!(a.log, b.log);
    let other = train(
        backbone(&corpus),
        &tr,
        &[],
        &TrainConfig { seed: 8, ..cfg(3) },
        &EvalConfig::default(),
        |_| Ok(()),
    )
    .unwrap();
    assert_ne!(encode_params(&a.model.params), encode_params(&other.model.params));
}

#[test]
fn single_video_overfits() {
    let corpus = small_corpus(1, 11);
    let tr: Vec<&Video> = corpus.split(Split::Train).collect();
    let out = train(backbone(&corpus), &tr, &[], &cfg(200), &EvalConfig::default(), |_| {
        Ok(())
    })
    .unwrap();
    let last = out.log.last().unwrap();
    assert!(last.base_loss < 0.05, "base loss after 200 epochs: {}", last.base_loss);
}

#[test]
fn consistency_weight_pushes_the_penalty_down() {
    let corpus = small_corpus(6, 5);
    let tr: Vec<&Video> = corpus.split(Split::Train).collect();
    let lfc_with = |lambda1: f64| {
        let c = TrainConfig { lambda1, ..cfg(15) };
        let out = train(backbone(&corpus), &tr, &[], &c, &EvalConfig::default(), |_| Ok(())).unwrap();
        out.log.last().unwrap().lfc
    };
    let (free, pushed) = (lfc_with(0.0), lfc_with(100.0));
    assert!(pushed < free, "lfc with weight 100: {pushed}, with weight 0: {free}");
}

fn partition_of(model: &Model, v: &Video, c: &TrainConfig) -> Vec<SnippetKind> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &v.rgb, &v.flow, &c.settings, None).unwrap();
    fwd.partition.kinds().to_vec()
}

/// The snippet partition is discrete, so the objective jumps whenever a step
/// moves a snippet across the attention cut. Descent is only expected on
/// steps that keep the partition.
#[test]
fn small_steps_decrease_the_loss_on_a_fixed_video() {
    let corpus = small_corpus(4, 9);
    let c = TrainConfig {
        learning_rate: 1e-4,
        ..cfg(1)
    };
    let (mut smooth, mut decreased) = (0, 0);
    for v in corpus.split(Split::Train) {
        let mut model = Model::new(backbone(&corpus), c.settings.hyper.layers, 1);
        let mut adam = Adam::new(&model.params, c.learning_rate, c.beta1, c.beta2, c.adam_eps);
        for _ in 0..50 {
            let before_kinds = partition_of(&model, v, &c);
            let (_, before, grads) = loss_and_grad(&model, &v.rgb, &v.flow, &v.label, &c, None).unwrap();
            adam.step(&mut model.params, &grads);
            let after = loss_value(&model, &v.rgb, &v.flow, &v.label, &c, None).unwrap();
            if partition_of(&model, v, &c) == before_kinds {
                smooth += 1;
                if after < before {
                    decreased += 1;
                }
            }
        }
    }
    assert!(smooth >= 50, "only {smooth} partition-preserving steps");
    assert!(
        decreased as f64 >= 0.95 * smooth as f64,
        "{decreased} of {smooth} steps decreased the loss"
    );

    // Without the graph stage the objective is smooth everywhere.
    let mut base = c.clone();
    base.settings.flags = GraphFlags::baseline();
    let v = corpus.split(Split::Train).next().unwrap();
    let mut model = Model::new(backbone(&corpus), base.settings.hyper.layers, 1);
    let mut adam = Adam::new(&model.params, base.learning_rate, base.beta1, base.beta2, base.adam_eps);
    let mut down = 0;
    for _ in 0..50 {
        let (_, before, grads) = loss_and_grad(&model, &v.rgb, &v.flow, &v.label, &base, None).unwrap();
        adam.step(&mut model.params, &grads);
        if loss_value(&model, &v.rgb, &v.flow, &v.label, &base, None).unwrap() < before {
            down += 1;
        }
    }
    assert!(down >= 48, "{down} of 50 baseline steps decreased the loss");
}

#[test]
fn grad_check_passes_and_is_pure() {
    let inst = GradCheckInstance {
        feature_dim: 8,
        ..GradCheckInstance::default()
    };
    for flags in [GraphFlags::default(), GraphFlags::baseline()] {
        let mut c = cfg(1);
        c.settings.flags = flags;
        let first = grad_check(&c, &inst, false).unwrap();
        assert!(first.passes(1e-4), "max relative error {}", first.max_rel_error);
        let again = grad_check(&c, &inst, false).unwrap();
        assert_eq!(first.max_rel_error, again.max_rel_error);
        assert_eq!(first.entries_checked, again.entries_checked);
    }
    let bugged = grad_check(&cfg(1), &inst, true).unwrap();
    assert!(!bugged.passes(1e-4));
}

#[test]
fn baseline_flags_reproduce_the_backbone() {
    let corpus = small_corpus(2, 4);
    let mut c = cfg(2);
    c.settings.flags = GraphFlags {
        enable_graph_avg: false,
        enable_gcn: false,
        enable_lfc: false,
        ..GraphFlags::default()
    };
    let tr: Vec<&Video> = corpus.split(Split::Train).collect();
    let out = train(backbone(&corpus), &tr, &[], &c, &EvalConfig::default(), |_| Ok(())).unwrap();
    assert!(out.log.iter().all(|m| m.lfc == 0.0));
    let m = &out.model;
    for v in corpus.split(Split::Test) {
        let inf = m.infer(&v.rgb, &v.flow, &c.settings).unwrap();
        let ar = attention_forward(&m.params, &m.backbone, &v.rgb).unwrap();
        let af = attention_forward(&m.params, &m.backbone, &v.flow).unwrap();
        assert_eq!(ar.as_slice(), inf.att_rgb.as_slice());
        assert_eq!(af.as_slice(), inf.att_flow.as_slice());
        let fused = fuse_attention(&ar, &af).unwrap();
        assert_eq!(fused.as_slice(), inf.att_fused.as_slice());
        let cas = cas_forward(&m.params, &m.backbone, &v.rgb, &v.flow).unwrap();
        assert_eq!(cas, inf.cas);
        let sup = suppress_cas(&cas, &fused).unwrap();
        assert_eq!(sup, inf.cas_suppressed);
        assert_eq!(video_scores(&sup, c.settings.k_ratio).unwrap(), inf.video_scores);
    }
}

#[test]
fn nan_features_abort_naming_the_video() {
    let mut corpus = small_corpus(2, 6);
    let bad = corpus.videos[1].id.clone();
    corpus.videos[1].rgb.values.as_mut_slice()[0] = f64::NAN;
    let tr: Vec<&Video> = corpus.split(Split::Train).collect();
    let err = train(backbone(&corpus), &tr, &[], &cfg(1), &EvalConfig::default(), |_| Ok(()))
        .err()
        .expect("training on NaN features must fail");
    assert!(err.to_string().contains(&bad), "{err}");
    assert_eq!(err.exit_code(), 4);
}
