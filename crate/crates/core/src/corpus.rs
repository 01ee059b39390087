//! Synthetic two-stream corpus with known segment boundaries.
//!
//! Every category owns one centroid per modality, and so does background.
//! Snippets inside a segment sit on their category centroid; a few snippets
//! on either side interpolate toward background. A fraction of action
//! snippets has one modality pulled toward background, which produces the
//! modality disagreement that pre-classification has to cope with.
//!
//! On disk a corpus is a directory:
//!
//! ```text
//! corpus.cfg          generation parameters, key=value
//! manifest.csv        video_id,split
//! annotations.csv     video_id,start,end,category   (1-based, inclusive)
//! labels.csv          video_id,cat|cat|...
//! features/<id>.bin   "DDGF", u32 version, u32 T, u32 D, rgb D×T, flow D×T
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::base_model::{FeatureSequence, Modality, VideoLabel};
use crate::checkpoint::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"DDGF";
pub const FEATURE_VERSION: u32 = 1;

/// Upper bound on the cosine between any two centroids of one modality.
pub const MAX_CENTROID_COSINE: f64 = 0.3;
/// Weight left on the category centroid of a snippet hit by disagreement.
pub const DISAGREEMENT_ACTION_WEIGHT: f64 = 0.25;

/// Generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_categories: usize,
    pub feature_dim: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Snippets per video.
    pub snippets: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_len: usize,
    pub max_segment_len: usize,
    /// Interpolated snippets on each side of a segment.
    pub boundary_width: usize,
    /// Expected euclidean norm of the additive gaussian noise per snippet.
    pub noise_scale: f64,
    /// Probability that an action snippet has one modality pulled to background.
    pub disagreement_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_categories: 4,
            feature_dim: 32,
            num_train: 60,
            num_test: 30,
            snippets: 80,
            min_segments: 2,
            max_segments: 4,
            min_segment_len: 6,
            max_segment_len: 14,
            boundary_width: 3,
            noise_scale: 0.25,
            disagreement_prob: 0.1,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn footprint(&self, len: usize) -> usize {
        len + 2 * self.boundary_width
    }

    pub fn validate(&self) -> Result<()> {
        let spec = |m: String| Err(Error::Spec(m));
        if self.num_categories < 2 || self.feature_dim < 4 || self.snippets < 16 {
            return spec(format!(
                "need at least 2 categories, 4 dimensions and 16 snippets, got {}, {}, {}",
                self.num_categories, self.feature_dim, self.snippets
            ));
        }
        if self.max_segments == 0 || self.min_segments == 0 {
            return spec("every video needs at least one segment".into());
        }
        if self.min_segments > self.max_segments {
            return spec(format!(
                "min_segments {} exceeds max_segments {}",
                self.min_segments, self.max_segments
            ));
        }
        if self.min_segment_len == 0 || self.min_segment_len > self.max_segment_len {
            return spec(format!(
                "segment length range [{}, {}] is empty",
                self.min_segment_len, self.max_segment_len
            ));
        }
        let need = self.min_segments * self.footprint(self.min_segment_len);
        if need > self.snippets {
            return spec(format!(
                "{} segments of length {} with boundary width {} need {need} snippets, videos have {}",
                self.min_segments, self.min_segment_len, self.boundary_width, self.snippets
            ));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return spec(format!("noise_scale must be non-negative, got {}", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.disagreement_prob) {
            return spec(format!(
                "disagreement_prob must be in [0, 1], got {}",
                self.disagreement_prob
            ));
        }
        Ok(())
    }

    fn to_text(&self) -> String {
        format!(
            "num_categories={}\nfeature_dim={}\nnum_train={}\nnum_test={}\nsnippets={}\n\
             min_segments={}\nmax_segments={}\nmin_segment_len={}\nmax_segment_len={}\n\
             boundary_width={}\nnoise_scale={:?}\ndisagreement_prob={:?}\nseed={}\n",
            self.num_categories,
            self.feature_dim,
            self.num_train,
            self.num_test,
            self.snippets,
            self.min_segments,
            self.max_segments,
            self.min_segment_len,
            self.max_segment_len,
            self.boundary_width,
            self.noise_scale,
            self.disagreement_prob,
            self.seed
        )
    }

    fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len() as u64;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Format {
                path: path.to_path_buf(),
                offset: here,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got `{line}`")))?;
            let int = || value.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            let float = || value.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "num_categories" => spec.num_categories = int()?,
                "feature_dim" => spec.feature_dim = int()?,
                "num_train" => spec.num_train = int()?,
                "num_test" => spec.num_test = int()?,
                "snippets" => spec.snippets = int()?,
                "min_segments" => spec.min_segments = int()?,
                "max_segments" => spec.max_segments = int()?,
                "min_segment_len" => spec.min_segment_len = int()?,
                "max_segment_len" => spec.max_segment_len = int()?,
                "boundary_width" => spec.boundary_width = int()?,
                "noise_scale" => spec.noise_scale = float()?,
                "disagreement_prob" => spec.disagreement_prob = float()?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth action instance, 1-based snippet positions inclusive on
/// both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub category: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// 0-based inclusive snippet range.
    pub fn indices(&self) -> (usize, usize) {
        (self.start - 1, self.end - 1)
    }
}

/// What generated a snippet; kept for diagnostics and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnippetOrigin {
    Background,
    Action {
        category: usize,
    },
    /// `alpha` is the weight on the category centroid.
    Boundary {
        category: usize,
        alpha: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Video {
    pub id: String,
    pub split: Split,
    pub rgb: FeatureSequence,
    pub flow: FeatureSequence,
    pub segments: Vec<Segment>,
    pub label: VideoLabel,
}

impl Video {
    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }
}

/// Class and background centroids of both modalities, unit norm.
#[derive(Clone, Debug)]
pub struct Centroids {
    /// `[modality][category]`, background stored last.
    pub vectors: [Vec<Vec<f64>>; 2],
}

impl Centroids {
    pub fn category(&self, m: Modality, c: usize) -> &[f64] {
        &self.vectors[m as usize][c]
    }

    pub fn background(&self, m: Modality) -> &[f64] {
        self.vectors[m as usize].last().expect("background centroid")
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub videos: Vec<Video>,
    /// Present only for freshly generated corpora.
    pub centroids: Option<Centroids>,
    /// Per-video snippet origins, aligned with `videos`; empty after loading.
    pub origins: Vec<Vec<SnippetOrigin>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_centroids(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    const TRIES: usize = 10_000;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut placed = false;
        for _ in 0..TRIES {
            let v = unit_vector(rng, dim);
            if out.iter().all(|u| cosine(u, &v) < MAX_CENTROID_COSINE) {
                out.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Spec(format!(
                "could not place {count} centroids with pairwise cosine below \
                 {MAX_CENTROID_COSINE} in {dim} dimensions"
            )));
        }
    }
    Ok(out)
}

/// Segment layout of one video: each segment plus its boundary margins
/// occupies a disjoint block, and leftover snippets are spread between blocks.
fn sample_layout(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Vec<(usize, usize)> {
    let w = spec.boundary_width;
    let fit = spec.snippets / spec.footprint(spec.min_segment_len);
    let n = rng.random_range(spec.min_segments..=spec.max_segments.min(fit));
    let mut lens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.min_segment_len..=spec.max_segment_len))
        .collect();
    while lens.iter().map(|&l| spec.footprint(l)).sum::<usize>() > spec.snippets {
        let longest = (0..n).max_by_key(|&i| (lens[i], std::cmp::Reverse(i))).expect("n > 0");
        lens[longest] -= 1;
    }
    let slack = spec.snippets - lens.iter().map(|&l| spec.footprint(l)).sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut pos = 0;
    let mut prev = 0;
    let mut out = Vec::with_capacity(n);
    for (len, cut) in lens.into_iter().zip(cuts) {
        pos += cut - prev + w;
        prev = cut;
        out.push((pos, pos + len - 1));
        pos += len + w;
    }
    out
}

fn mix(a: &[f64], b: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect()
}

fn generate_video(
    rng: &mut ChaCha8Rng,
    spec: &CorpusSpec,
    centroids: &Centroids,
    id: String,
    split: Split,
) -> Result<(Video, Vec<SnippetOrigin>)> {
    let (t_len, d) = (spec.snippets, spec.feature_dim);
    let w = spec.boundary_width;
    let segments: Vec<Segment> = sample_layout(rng, spec)
        .into_iter()
        .map(|(start, end)| Segment {
            start: start + 1,
            end: end + 1,
            category: rng.random_range(0..spec.num_categories),
        })
        .collect();

    let mut origins = vec![SnippetOrigin::Background; t_len];
    for s in &segments {
        let (start, end) = s.indices();
        for o in &mut origins[start..=end] {
            *o = SnippetOrigin::Action { category: s.category };
        }
        for k in 1..=w {
            let alpha = 1.0 - k as f64 / (w + 1) as f64;
            let b = SnippetOrigin::Boundary {
                category: s.category,
                alpha,
            };
            origins[start - k] = b;
            origins[end + k] = b;
        }
    }

    let noise = Normal::new(0.0, spec.noise_scale / (d as f64).sqrt())
        .map_err(|e| Error::Spec(format!("noise distribution: {e}")))?;
    let mut streams = [Matrix::zeros(d, t_len), Matrix::zeros(d, t_len)];
    for (t, origin) in origins.iter().enumerate() {
        let pulled = match origin {
            SnippetOrigin::Action { .. } if rng.random_bool(spec.disagreement_prob) => Some(if rng.random_bool(0.5) {
                Modality::Rgb
            } else {
                Modality::Flow
            }),
            _ => None,
        };
        for m in Modality::BOTH {
            let bg = centroids.background(m);
            let base = match *origin {
                SnippetOrigin::Background => bg.to_vec(),
                SnippetOrigin::Action { category } if pulled == Some(m) => {
                    mix(centroids.category(m, category), bg, DISAGREEMENT_ACTION_WEIGHT)
                }
                SnippetOrigin::Action { category } => centroids.category(m, category).to_vec(),
                SnippetOrigin::Boundary { category, alpha } => mix(centroids.category(m, category), bg, alpha),
            };
            for (r, b) in base.iter().enumerate() {
                let eps = if spec.noise_scale > 0.0 { noise.sample(rng) } else { 0.0 };
                streams[m as usize].as_mut_slice()[r * t_len + t] = b + eps;
            }
        }
    }
    let [rgb, flow] = streams;
    let cats: Vec<usize> = segments.iter().map(|s| s.category).collect();
    let video = Video {
        id,
        split,
        rgb: FeatureSequence::new(Modality::Rgb, rgb)?,
        flow: FeatureSequence::new(Modality::Flow, flow)?,
        label: VideoLabel::from_categories(spec.num_categories, &cats)?,
        segments,
    };
    Ok((video, origins))
}

/// Generates a corpus; identical specs give bitwise identical corpora.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = spec.num_categories + 1;
    let centroids = Centroids {
        vectors: [
            sample_centroids(&mut rng, count, spec.feature_dim)?,
            sample_centroids(&mut rng, count, spec.feature_dim)?,
        ],
    };
    let mut videos = Vec::with_capacity(spec.num_train + spec.num_test);
    let mut origins = Vec::with_capacity(spec.num_train + spec.num_test);
    let splits =
        std::iter::repeat_n(Split::Train, spec.num_train).chain(std::iter::repeat_n(Split::Test, spec.num_test));
    for (i, split) in splits.enumerate() {
        let (v, o) = generate_video(&mut rng, spec, &centroids, format!("video_{i:04}"), split)?;
        videos.push(v);
        origins.push(o);
    }
    Ok(Corpus {
        spec: spec.clone(),
        videos,
        centroids: Some(centroids),
        origins,
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let features = dir.join("features");
        fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("corpus.cfg", self.spec.to_text())?;
        let mut manifest = String::new();
        let mut annotations = String::new();
        let mut labels = String::new();
        for v in &self.videos {
            manifest.push_str(&format!("{},{}\n", v.id, v.split));
            for s in &v.segments {
                annotations.push_str(&format!("{},{},{},{}\n", v.id, s.start, s.end, s.category));
            }
            let cats: Vec<String> = v.label.categories().iter().map(usize::to_string).collect();
            labels.push_str(&format!("{},{}\n", v.id, cats.join("|")));
            write_features(&feature_path(dir, &v.id), &v.rgb, &v.flow)?;
        }
        write("manifest.csv", manifest)?;
        write("annotations.csv", annotations)?;
        write("labels.csv", labels)?;
        Ok(())
    }

    /// Reads a corpus directory. Feature files are read for every listed video.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(PathBuf, String)> {
            let p = dir.join(name);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok((p, text))
        };
        let (cfg_path, cfg) = read("corpus.cfg")?;
        let spec = CorpusSpec::from_text(&cfg, &cfg_path)?;

        let (mpath, manifest) = read("manifest.csv")?;
        let mut order: Vec<(String, Split)> = Vec::new();
        for (offset, fields) in csv_lines(&manifest) {
            let bad = |msg: String| format_err(&mpath, offset, msg);
            let [id, split] = fields[..] else {
                return Err(bad(format!("expected video_id,split, got {} fields", fields.len())));
            };
            let split = Split::parse(split).ok_or_else(|| bad(format!("unknown split `{split}`")))?;
            order.push((id.to_string(), split));
        }
        let index: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();

        let (apath, annotations) = read("annotations.csv")?;
        let mut segments: Vec<Vec<Segment>> = vec![Vec::new(); order.len()];
        for (offset, fields) in csv_lines(&annotations) {
            let bad = |msg: String| format_err(&apath, offset, msg);
            let [id, start, end, cat] = fields[..] else {
                return Err(bad("expected video_id,start,end,category".into()));
            };
            let &i = index.get(id).ok_or_else(|| bad(format!("unknown video `{id}`")))?;
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            let seg = Segment {
                start: num(start)?,
                end: num(end)?,
                category: num(cat)?,
            };
            if seg.start == 0 || seg.start > seg.end || seg.end > spec.snippets || seg.category >= spec.num_categories {
                return Err(bad(format!("segment {seg:?} out of range")));
            }
            segments[i].push(seg);
        }

        let (lpath, labels_text) = read("labels.csv")?;
        let mut labels: Vec<Option<VideoLabel>> = vec![None; order.len()];
        for (offset, fields) in csv_lines(&labels_text) {
            let bad = |msg: String| format_err(&lpath, offset, msg);
            let [id, cats] = fields[..] else {
                return Err(bad("expected video_id,categories".into()));
            };
            let &i = index.get(id).ok_or_else(|| bad(format!("unknown video `{id}`")))?;
            let cats: Vec<usize> = cats
                .split('|')
                .map(|c| c.parse::<usize>().map_err(|e| bad(format!("`{c}`: {e}"))))
                .collect::<Result<_>>()?;
            labels[i] = Some(VideoLabel::from_categories(spec.num_categories, &cats).map_err(|e| bad(e.to_string()))?);
        }

        let mut videos = Vec::with_capacity(order.len());
        for (i, (id, split)) in order.into_iter().enumerate() {
            let path = feature_path(dir, &id);
            let (rgb, flow) = read_features(&path)?;
            if rgb.dim() != spec.feature_dim || rgb.len() != spec.snippets {
                return Err(format_err(
                    &path,
                    8,
                    format!(
                        "features are {}x{}, corpus declares {}x{}",
                        rgb.dim(),
                        rgb.len(),
                        spec.feature_dim,
                        spec.snippets
                    ),
                ));
            }
            let label = labels[i]
                .take()
                .ok_or_else(|| format_err(&lpath, labels_text.len() as u64, format!("no label line for `{id}`")))?;
            videos.push(Video {
                id,
                split,
                rgb,
                flow,
                segments: std::mem::take(&mut segments[i]),
                label,
            });
        }
        Ok(Self {
            spec,
            videos,
            centroids: None,
            origins: Vec::new(),
        })
    }
}

fn format_err(path: &Path, offset: u64, msg: String) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    }
}

/// Non-empty lines split on commas, with the byte offset of each line.
fn csv_lines(text: &str) -> impl Iterator<Item = (u64, Vec<&str>)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |line| {
        let here = offset;
        offset += line.len() as u64;
        let line = line.trim();
        (!line.is_empty()).then(|| (here, line.split(',').map(str::trim).collect()))
    })
}

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("features").join(format!("{id}.bin"))
}

pub fn encode_features(rgb: &FeatureSequence, flow: &FeatureSequence) -> Vec<u8> {
    let (d, t) = rgb.values.shape();
    let mut out = Vec::with_capacity(16 + 16 * d * t);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for m in [&rgb.values, &flow.values] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_features(path: &Path, rgb: &FeatureSequence, flow: &FeatureSequence) -> Result<()> {
    if rgb.values.shape() != flow.values.shape() {
        return Err(Error::Shape(format!(
            "rgb {:?} and flow {:?} differ",
            rgb.values.shape(),
            flow.values.shape()
        )));
    }
    fs::write(path, encode_features(rgb, flow)).map_err(|e| Error::io(path, e))
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(FeatureSequence, FeatureSequence)> {
    let mut r = ByteReader::new(bytes, path);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad feature magic".into()));
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(format_err(path, 4, format!("unsupported feature version {version}")));
    }
    let t = r.u32("snippet count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    if t == 0 || d == 0 {
        return Err(format_err(path, 8, format!("empty feature matrix {d}x{t}")));
    }
    let rgb = r.matrix(d, t, "rgb features")?;
    let flow = r.matrix(d, t, "flow features")?;
    r.finish()?;
    Ok((
        FeatureSequence::new(Modality::Rgb, rgb)?,
        FeatureSequence::new(Modality::Flow, flow)?,
    ))
}

pub fn read_features(path: &Path) -> Result<(FeatureSequence, FeatureSequence)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}
