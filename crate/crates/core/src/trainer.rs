//! Composite objective, Adam, the training loop and the gradient check.

use std::fmt::Write as _;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::base_model::{BackboneConfig, FeatureSequence, Modality, VideoLabel};
use crate::corpus::Video;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig};
use crate::graph::{DdgHyper, GraphFlags};
use crate::model::{ForwardSettings, Model, Preclassification, VideoForward};
use crate::numerics::{finite_diff_check, GradCheckReport, Gradients, Matrix, ParamSet, Tape, Var};

/// Extra loss term weighted by `lambda2`. The default contributes nothing.
pub trait ComplementaryLoss: Send + Sync {
    fn record(&self, tape: &mut Tape, fwd: &VideoForward) -> Result<Var>;
}

/// Constant zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoComplementaryLoss;

impl ComplementaryLoss for NoComplementaryLoss {
    fn record(&self, tape: &mut Tape, _fwd: &VideoForward) -> Result<Var> {
        Ok(tape.constant(Matrix::zeros(1, 1)))
    }
}

#[derive(Clone)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub settings: ForwardSettings,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Evaluate on the held-out videos every this many epochs; 0 disables.
    pub eval_every: usize,
    pub complementary: Arc<dyn ComplementaryLoss>,
}

impl std::fmt::Debug for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainConfig")
            .field("lambda1", &self.lambda1)
            .field("lambda2", &self.lambda2)
            .field("learning_rate", &self.learning_rate)
            .field("epochs", &self.epochs)
            .field("seed", &self.seed)
            .field("settings", &self.settings)
            .field("eval_every", &self.eval_every)
            .finish_non_exhaustive()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 3.2,
            learning_rate: 1e-3,
            epochs: 100,
            seed: 0,
            settings: ForwardSettings::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 0,
            complementary: Arc::new(NoComplementaryLoss),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad(format!(
                "lambda weights must be non-negative, got {} and {}",
                self.lambda1, self.lambda2
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon must be positive".into());
        }
        self.settings.hyper.validate()
    }

    pub fn hyper(&self) -> &DdgHyper {
        &self.settings.hyper
    }

    pub fn flags(&self) -> &GraphFlags {
        &self.settings.flags
    }
}

/// `base + λ₁·lfc + λ₂·lcl`.
pub fn total_loss(base: f64, lfc: f64, lcl: f64, cfg: &TrainConfig) -> f64 {
    base + cfg.lambda1 * lfc + cfg.lambda2 * lcl
}

/// Loss terms of one recorded forward pass.
pub struct RecordedLoss {
    pub total: Var,
    pub base: f64,
    pub lfc: f64,
    pub lcl: f64,
}

/// Records the composite objective on `tape`.
pub fn record_loss(
    tape: &mut Tape,
    model: &Model,
    fwd: &VideoForward,
    label: &VideoLabel,
    cfg: &TrainConfig,
) -> Result<RecordedLoss> {
    let base = model.base_loss(tape, fwd, label, &cfg.settings)?;
    let lcl = cfg.complementary.record(tape, fwd)?;
    let mut total = base;
    let mut lfc_value = 0.0;
    if let Some(lfc) = fwd.loss_fc {
        lfc_value = tape.scalar(lfc);
        let weighted = tape.scale(lfc, cfg.lambda1);
        total = tape.add(total, weighted)?;
    }
    let weighted = tape.scale(lcl, cfg.lambda2);
    total = tape.add(total, weighted)?;
    Ok(RecordedLoss {
        total,
        base: tape.scalar(base),
        lfc: lfc_value,
        lcl: tape.scalar(lcl),
    })
}

/// Loss value and gradients for one video.
pub fn loss_and_grad(
    model: &Model,
    rgb: &FeatureSequence,
    flow: &FeatureSequence,
    label: &VideoLabel,
    cfg: &TrainConfig,
    frozen: Option<&Preclassification>,
) -> Result<(RecordedLoss, f64, Gradients)> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, rgb, flow, &cfg.settings, frozen)?;
    let loss = record_loss(&mut tape, model, &fwd, label, cfg)?;
    let value = tape.scalar(loss.total);
    let grads = tape.backward(loss.total, &model.params)?;
    Ok((loss, value, grads))
}

/// Loss value only.
pub fn loss_value(
    model: &Model,
    rgb: &FeatureSequence,
    flow: &FeatureSequence,
    label: &VideoLabel,
    cfg: &TrainConfig,
    frozen: Option<&Preclassification>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, rgb, flow, &cfg.settings, frozen)?;
    let loss = record_loss(&mut tape, model, &fwd, label, cfg)?;
    Ok(tape.scalar(loss.total))
}

/// First and second moment adaptive optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            let p = params.get_mut(id).as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub base_loss: f64,
    pub lfc: f64,
    pub total: f64,
    pub map_avg: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,base_loss,lfc,total,map_avg";

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{:.8},{:.8},{:.8},",
            self.epoch, self.base_loss, self.lfc, self.total
        );
        if let Some(m) = self.map_avg {
            let _ = write!(s, "{m:.6}");
        }
        s
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in log {
        out.push_str(&m.csv_line());
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Trains a fresh model on `train` videos. `held_out` is only used when
/// `cfg.eval_every > 0`. `on_epoch` sees each epoch's metrics as they land.
pub fn train(
    backbone: BackboneConfig,
    train: &[&Video],
    held_out: &[&Video],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if let Some(v) = train.iter().find(|v| !v.label.has_positive()) {
        return Err(Error::Contract(format!("video {} has no positive category", v.id)));
    }
    let mut model = Model::new(backbone, cfg.settings.hyper.layers, cfg.seed);
    let mut adam = Adam::new(&model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut base, mut lfc, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let v = train[i];
            let (loss, value, grads) = match loss_and_grad(&model, &v.rgb, &v.flow, &v.label, cfg, None) {
                Ok(r) => r,
                // Non-finite inputs or weights trip shape and domain checks
                // before a loss exists; report them against the video.
                Err(e) if !v.rgb.values.is_finite() || !v.flow.values.is_finite() || !params_finite(&model) => {
                    return Err(Error::NonFiniteLoss {
                        video: v.id.clone(),
                        detail: format!("epoch {epoch}: {e}"),
                    });
                }
                Err(e) => return Err(e),
            };
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    video: v.id.clone(),
                    detail: format!("epoch {epoch}: base {} lfc {} total {value}", loss.base, loss.lfc),
                });
            }
            adam.step(&mut model.params, &grads);
            base += loss.base;
            lfc += loss.lfc;
            total += value;
        }
        let n = train.len() as f64;
        let map_avg = if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 && !held_out.is_empty() {
            Some(evaluate(&model, held_out, &cfg.settings, eval)?.average_map())
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            base_loss: base / n,
            lfc: lfc / n,
            total: total / n,
            map_avg,
        };
        debug!(
            "epoch {epoch}: base {:.5} lfc {:.5} total {:.5}",
            m.base_loss, m.lfc, m.total
        );
        on_epoch(&m)?;
        log.push(m);
    }
    if let Some(last) = log.last() {
        info!("trained {} epochs, final total loss {:.5}", cfg.epochs, last.total);
    }
    Ok(TrainOutcome { model, log })
}

fn params_finite(model: &Model) -> bool {
    model.params.iter().all(|(_, _, m)| m.is_finite())
}

// Keeps the shuffle stream independent of the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5eed_0f00_7a1e;

/// Size of the random instance used by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradCheckInstance {
    pub snippets: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for GradCheckInstance {
    fn default() -> Self {
        Self {
            snippets: 12,
            feature_dim: 6,
            num_classes: 3,
            seed: 0,
        }
    }
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Clustered random features so that every partition cell and the graph
/// filter are exercised even on a tiny instance.
fn gradcheck_features(rng: &mut ChaCha8Rng, inst: &GradCheckInstance, m: Modality) -> Result<FeatureSequence> {
    let (d, t) = (inst.feature_dim, inst.snippets);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let values = Matrix::from_fn(d, t, |r, c| {
        let noise: f64 = StandardNormal.sample(rng);
        centers[c % 3][r] + 0.1 * noise
    });
    FeatureSequence::new(m, values)
}

/// Compares analytic gradients of the composite loss against central
/// differences on a random instance. The pre-classification attention is
/// computed once and held fixed, so the discrete partition does not move
/// under the probes. `inject_bug` corrupts the analytic gradient on purpose.
pub fn grad_check(cfg: &TrainConfig, inst: &GradCheckInstance, inject_bug: bool) -> Result<GradCheckReport> {
    cfg.validate()?;
    if inst.snippets > 16 || inst.feature_dim > 8 || inst.snippets < 2 || inst.num_classes == 0 {
        return Err(Error::Domain(format!(
            "grad check wants 2 ≤ T ≤ 16, D ≤ 8 and C ≥ 1, got T={}, D={}, C={}",
            inst.snippets, inst.feature_dim, inst.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed);
    let rgb = gradcheck_features(&mut rng, inst, Modality::Rgb)?;
    let flow = gradcheck_features(&mut rng, inst, Modality::Flow)?;
    let positive = rng.random_range(0..inst.num_classes);
    let label = VideoLabel::from_categories(inst.num_classes, &[positive])?;
    let model = Model::new(
        BackboneConfig::new(inst.feature_dim, inst.num_classes),
        cfg.settings.hyper.layers,
        inst.seed.wrapping_add(1),
    );
    let frozen = model.preclassify_attention(&rgb, &flow)?;
    let (_, _, mut grads) = loss_and_grad(&model, &rgb, &flow, &label, cfg, Some(&frozen))?;
    if inject_bug {
        let id = model.backbone.classifier.classifier.weight;
        let g = grads.get_mut(id);
        for v in g.as_mut_slice() {
            *v = *v * 1.5 + 1e-3;
        }
    }
    let mut probe = model.clone();
    Ok(finite_diff_check(
        &model.params,
        &grads,
        GRADCHECK_EPS,
        |p: &ParamSet| {
            probe.params = p.clone();
            loss_value(&probe, &rgb, &flow, &label, cfg, Some(&frozen)).unwrap_or(f64::NAN)
        },
    ))
}
