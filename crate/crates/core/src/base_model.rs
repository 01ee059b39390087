//! Two-stream attention and classification backbone.
//!
//! Per modality an attention module maps a D×T feature sequence to a 1×T
//! sequence of action weights. A fusion convolution over the channel-wise
//! concatenation of both streams feeds a 1-span classifier that emits C+1
//! logits per snippet (the last row is background). The suppressed CAS
//! scales each snippet's logits by the fused attention.
//!
//! Every operation is written once against the [`Tape`]; the plain
//! functions run a throwaway tape and return values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, ParamId, ParamSet, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }
}

/// D×T snippet features of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub values: Matrix,
}

impl FeatureSequence {
    pub fn new(modality: Modality, values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence must be at least 1x1, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Domain("non-finite feature value".into()));
        }
        Ok(Self { modality, values })
    }

    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }
}

/// 1×T action weights, each strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSequence {
    values: Matrix,
}

impl AttentionSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() != 1 {
            return Err(Error::Shape(format!("attention must be 1xT, got {:?}", values.shape())));
        }
        if values.as_slice().iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Domain("attention outside [0, 1]".into()));
        }
        Ok(Self { values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(Matrix::row_vector(values)?)
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }
}

/// (C+1)×T class activation sequence; the last row is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Cas {
    values: Matrix,
}

impl Cas {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() < 2 {
            return Err(Error::Shape(format!(
                "CAS needs at least one action row plus background, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn num_classes(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }
}

/// Multi-hot video label over C action categories.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct VideoLabel {
    positives: Vec<bool>,
}

impl VideoLabel {
    pub fn new(positives: Vec<bool>) -> Self {
        Self { positives }
    }

    pub fn from_categories(num_classes: usize, cats: &[usize]) -> Result<Self> {
        let mut positives = vec![false; num_classes];
        for &c in cats {
            if c >= num_classes {
                return Err(Error::Contract(format!(
                    "category {c} out of range for {num_classes} classes"
                )));
            }
            positives[c] = true;
        }
        Ok(Self { positives })
    }

    pub fn num_classes(&self) -> usize {
        self.positives.len()
    }

    pub fn is_positive(&self, c: usize) -> bool {
        self.positives[c]
    }

    pub fn categories(&self) -> Vec<usize> {
        (0..self.positives.len()).filter(|&c| self.positives[c]).collect()
    }

    pub fn has_positive(&self) -> bool {
        self.positives.iter().any(|&p| p)
    }

    /// Label over C+1 categories with the background slot set as given,
    /// normalized to a distribution.
    fn target(&self, background: bool) -> Vec<f64> {
        let mut t: Vec<f64> = self.positives.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
        t.push(if background { 1.0 } else { 0.0 });
        let total: f64 = t.iter().sum();
        t.iter().map(|v| v / total).collect()
    }
}

/// A temporal convolution: weights Cout×(Cin·K) and bias Cout×1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl ConvIds {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let w = Matrix::from_fn(cout, cin * kernel, |_, _| rng.random_range(-bound..=bound));
        let weight = params.add(format!("{prefix}.weight"), w);
        let bias = params.add(format!("{prefix}.bias"), Matrix::zeros(cout, 1));
        Self { weight, bias, kernel }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let cols = if self.kernel == 1 {
            x
        } else {
            tape.im2col(x, self.kernel)?
        };
        let y = tape.matmul(w, cols)?;
        Ok(tape.add_col_bias(y, b)?)
    }
}

/// Attention module: conv, LeakyReLU, conv to one channel, sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    pub conv1: ConvIds,
    pub conv2: ConvIds,
}

impl AttentionIds {
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: ConvIds::register(params, &format!("{prefix}.conv1"), dim, hidden, kernel, rng),
            conv2: ConvIds::register(params, &format!("{prefix}.conv2"), hidden, 1, kernel, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, f: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, params, f)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let z = self.conv2.forward(tape, params, h)?;
        Ok(tape.sigmoid(z))
    }
}

/// Fusion convolution 2D→D followed by the 1-span classifier D→C+1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierIds {
    pub fusion: ConvIds,
    pub classifier: ConvIds,
}

impl ClassifierIds {
    pub fn register(params: &mut ParamSet, dim: usize, num_classes: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Self {
            fusion: ConvIds::register(params, "fusion", 2 * dim, dim, kernel, rng),
            classifier: ConvIds::register(params, "classifier", dim, num_classes + 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, fr: Var, ff: Var) -> Result<Var> {
        let x = tape.concat_rows(fr, ff)?;
        let h = self.fusion.forward(tape, params, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.classifier.forward(tape, params, h)
    }
}

/// Architecture hyperparameters of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub attention_hidden: usize,
    /// Temporal kernel span of the attention and fusion convolutions (odd).
    pub kernel: usize,
}

impl BackboneConfig {
    pub fn new(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            attention_hidden: feature_dim,
            kernel: 3,
        }
    }
}

/// Parameter handles of the whole backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneIds {
    pub config: BackboneConfig,
    pub attention_rgb: AttentionIds,
    pub attention_flow: AttentionIds,
    pub classifier: ClassifierIds,
}

impl BackboneIds {
    pub fn register(params: &mut ParamSet, config: BackboneConfig, rng: &mut impl Rng) -> Self {
        let BackboneConfig {
            feature_dim: d,
            num_classes: c,
            attention_hidden: h,
            kernel: k,
        } = config;
        Self {
            config,
            attention_rgb: AttentionIds::register(params, "attention.rgb", d, h, k, rng),
            attention_flow: AttentionIds::register(params, "attention.flow", d, h, k, rng),
            classifier: ClassifierIds::register(params, d, c, k, rng),
        }
    }

    pub fn attention(&self, modality: Modality) -> &AttentionIds {
        match modality {
            Modality::Rgb => &self.attention_rgb,
            Modality::Flow => &self.attention_flow,
        }
    }
}

fn check_dim(f: &FeatureSequence, dim: usize) -> Result<()> {
    if f.dim() != dim {
        return Err(Error::Shape(format!(
            "{} features have dimension {}, model expects {dim}",
            f.modality.name(),
            f.dim()
        )));
    }
    Ok(())
}

/// Action weights for one modality.
pub fn attention_forward(params: &ParamSet, ids: &BackboneIds, f: &FeatureSequence) -> Result<AttentionSequence> {
    check_dim(f, ids.config.feature_dim)?;
    let mut tape = Tape::new();
    let x = tape.constant(f.values.clone());
    let a = ids.attention(f.modality).forward(&mut tape, params, x)?;
    AttentionSequence::new(tape.value(a).clone())
}

/// Elementwise mean of two attention sequences.
pub fn fuse_attention(ar: &AttentionSequence, af: &AttentionSequence) -> Result<AttentionSequence> {
    if ar.len() != af.len() {
        return Err(Error::Shape(format!(
            "attention lengths differ: {} vs {}",
            ar.len(),
            af.len()
        )));
    }
    let fused = ar.values.zip_with(&af.values, "fuse_attention", |a, b| (a + b) / 2.0)?;
    AttentionSequence::new(fused)
}

/// Class activation sequence from both streams.
pub fn cas_forward(params: &ParamSet, ids: &BackboneIds, fr: &FeatureSequence, ff: &FeatureSequence) -> Result<Cas> {
    check_dim(fr, ids.config.feature_dim)?;
    check_dim(ff, ids.config.feature_dim)?;
    if fr.len() != ff.len() {
        return Err(Error::Shape(format!(
            "stream lengths differ: {} vs {}",
            fr.len(),
            ff.len()
        )));
    }
    let mut tape = Tape::new();
    let xr = tape.constant(fr.values.clone());
    let xf = tape.constant(ff.values.clone());
    let p = ids.classifier.forward(&mut tape, params, xr, xf)?;
    Cas::new(tape.value(p).clone())
}

/// Scales column t of the CAS by attention weight t.
pub fn suppress_cas(p: &Cas, a: &AttentionSequence) -> Result<Cas> {
    if p.len() != a.len() {
        return Err(Error::Shape(format!(
            "CAS has {} snippets, attention {}",
            p.len(),
            a.len()
        )));
    }
    let m = &p.values;
    Cas::new(Matrix::from_fn(m.rows(), m.cols(), |c, t| m[(c, t)] * a.as_slice()[t]))
}

/// Number of snippets pooled per category for a sequence of length `t`.
pub fn top_k_count(t: usize, k_ratio: f64) -> usize {
    ((k_ratio * t as f64).ceil() as usize).clamp(1, t.max(1))
}

fn check_ratio(k_ratio: f64) -> Result<()> {
    if !(k_ratio > 0.0 && k_ratio <= 1.0) {
        return Err(Error::Domain(format!("k_ratio must be in (0, 1], got {k_ratio}")));
    }
    Ok(())
}

/// Top-k temporal mean per category, before the softmax.
pub fn video_logits(cas: &Cas, k_ratio: f64) -> Result<Vec<f64>> {
    check_ratio(k_ratio)?;
    let mut tape = Tape::new();
    let p = tape.constant(cas.values.clone());
    let pooled = tape.topk_mean_rows(p, top_k_count(cas.len(), k_ratio))?;
    Ok(tape.value(pooled).column(0))
}

/// Video-level class distribution over C+1 categories.
pub fn video_scores(cas: &Cas, k_ratio: f64) -> Result<Vec<f64>> {
    Ok(softmax(&video_logits(cas, k_ratio)?))
}

/// Recorded form of the two-term MIL loss: the raw CAS against the label
/// with background positive, plus the suppressed CAS against the label with
/// background negative.
pub fn base_loss_on_tape(tape: &mut Tape, p: Var, pbar: Var, label: &VideoLabel, k_ratio: f64) -> Result<Var> {
    check_ratio(k_ratio)?;
    if !label.has_positive() {
        return Err(Error::Contract("video label has no positive category".into()));
    }
    let rows = tape.value(p).rows();
    if rows != label.num_classes() + 1 || tape.value(pbar).rows() != rows {
        return Err(Error::Shape(format!(
            "CAS has {rows} rows, label covers {} classes",
            label.num_classes()
        )));
    }
    let k = top_k_count(tape.value(p).cols(), k_ratio);
    let fg = tape.topk_mean_rows(p, k)?;
    let fg_loss = tape.softmax_kl(fg, &label.target(true))?;
    let sup = tape.topk_mean_rows(pbar, k)?;
    let sup_loss = tape.softmax_kl(sup, &label.target(false))?;
    Ok(tape.add(fg_loss, sup_loss)?)
}

/// Value of the backbone MIL loss for fixed CAS values.
pub fn base_loss(p: &Cas, pbar: &Cas, label: &VideoLabel, k_ratio: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.values.clone());
    let pb = tape.constant(pbar.values.clone());
    let loss = base_loss_on_tape(&mut tape, pv, pb, label, k_ratio)?;
    Ok(tape.scalar(loss))
}
