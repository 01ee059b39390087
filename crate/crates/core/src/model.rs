//! Backbone plus graph stage, wired for one video at a time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::base_model::{
    base_loss_on_tape, video_scores, AttentionSequence, BackboneConfig, BackboneIds, Cas, FeatureSequence, Modality,
    VideoLabel,
};
use crate::error::{Error, Result};
use crate::graph::{ddg_on_tape, DdgHyper, GcnIds, GraphFlags, SnippetPartition, SubgraphSet};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

/// Everything a forward pass needs besides parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardSettings {
    pub hyper: DdgHyper,
    pub flags: GraphFlags,
    /// Fraction of snippets pooled by the top-k video aggregation.
    pub k_ratio: f64,
}

impl Default for ForwardSettings {
    fn default() -> Self {
        Self {
            hyper: DdgHyper::default(),
            flags: GraphFlags::default(),
            k_ratio: 0.125,
        }
    }
}

/// Pre-classification attention of both streams, computed on raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct Preclassification {
    pub rgb: AttentionSequence,
    pub flow: AttentionSequence,
}

/// Recorded forward pass of one video.
pub struct VideoForward {
    pub enhanced_rgb: Var,
    pub enhanced_flow: Var,
    pub att_rgb: Var,
    pub att_flow: Var,
    pub att_fused: Var,
    pub cas: Var,
    pub cas_suppressed: Var,
    pub loss_fc: Option<Var>,
    pub preclass: Preclassification,
    pub partition: SnippetPartition,
    pub subgraphs: Vec<SubgraphSet>,
}

/// Plain-valued inference result for one video.
#[derive(Clone, Debug)]
pub struct Inference {
    pub att_rgb: Vec<f64>,
    pub att_flow: Vec<f64>,
    pub att_fused: Vec<f64>,
    pub cas: Cas,
    pub cas_suppressed: Cas,
    /// Softmax over C+1 categories of the suppressed CAS top-k means.
    pub video_scores: Vec<f64>,
    pub partition: SnippetPartition,
    pub subgraphs: Vec<SubgraphSet>,
}

/// Learnable parameters and the handles that index them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: ParamSet,
    pub backbone: BackboneIds,
    pub gcn: GcnIds,
}

impl Model {
    /// Fresh parameters. Graph weights are always allocated so every
    /// ablation shares one checkpoint layout.
    pub fn new(config: BackboneConfig, gcn_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = BackboneIds::register(&mut params, config, &mut rng);
        let gcn = GcnIds::register(&mut params, config.feature_dim, gcn_layers, &mut rng);
        Self { params, backbone, gcn }
    }

    pub fn config(&self) -> BackboneConfig {
        self.backbone.config
    }

    fn check_inputs(&self, fr: &FeatureSequence, ff: &FeatureSequence) -> Result<()> {
        let d = self.config().feature_dim;
        if fr.dim() != d || ff.dim() != d || fr.len() != ff.len() {
            return Err(Error::Shape(format!(
                "model expects two {d}xT streams, got {:?} and {:?}",
                fr.values.shape(),
                ff.values.shape()
            )));
        }
        Ok(())
    }

    /// Attention of both streams on raw features, off the main tape.
    pub fn preclassify_attention(&self, fr: &FeatureSequence, ff: &FeatureSequence) -> Result<Preclassification> {
        self.check_inputs(fr, ff)?;
        let mut tape = Tape::new();
        let r = tape.constant(fr.values.clone());
        let f = tape.constant(ff.values.clone());
        let ar = self
            .backbone
            .attention(Modality::Rgb)
            .forward(&mut tape, &self.params, r)?;
        let af = self
            .backbone
            .attention(Modality::Flow)
            .forward(&mut tape, &self.params, f)?;
        Ok(Preclassification {
            rgb: AttentionSequence::new(tape.value(ar).clone())?,
            flow: AttentionSequence::new(tape.value(af).clone())?,
        })
    }

    /// Records the full pipeline: pre-classification on raw features, the
    /// graph stage, then attention and CAS on the enhanced features.
    ///
    /// `frozen` replaces the pre-classification attention, which keeps the
    /// discrete partition fixed across finite-difference probes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        fr: &FeatureSequence,
        ff: &FeatureSequence,
        settings: &ForwardSettings,
        frozen: Option<&Preclassification>,
    ) -> Result<VideoForward> {
        self.check_inputs(fr, ff)?;
        let preclass = match frozen {
            Some(p) => p.clone(),
            None => self.preclassify_attention(fr, ff)?,
        };
        let r = tape.constant(fr.values.clone());
        let f = tape.constant(ff.values.clone());
        let ddg = ddg_on_tape(
            tape,
            &self.params,
            &self.gcn,
            r,
            f,
            &preclass.rgb,
            &preclass.flow,
            &settings.hyper,
            &settings.flags,
        )?;
        let att_rgb = self
            .backbone
            .attention(Modality::Rgb)
            .forward(tape, &self.params, ddg.rgb)?;
        let att_flow = self
            .backbone
            .attention(Modality::Flow)
            .forward(tape, &self.params, ddg.flow)?;
        let sum = tape.add(att_rgb, att_flow)?;
        let att_fused = tape.scale(sum, 0.5);
        let cas = self
            .backbone
            .classifier
            .forward(tape, &self.params, ddg.rgb, ddg.flow)?;
        let cas_suppressed = tape.mul_row_broadcast(cas, att_fused)?;
        Ok(VideoForward {
            enhanced_rgb: ddg.rgb,
            enhanced_flow: ddg.flow,
            att_rgb,
            att_flow,
            att_fused,
            cas,
            cas_suppressed,
            loss_fc: ddg.loss_fc,
            preclass,
            partition: ddg.partition,
            subgraphs: ddg.subgraphs,
        })
    }

    /// Backbone MIL loss for a recorded forward pass.
    pub fn base_loss(
        &self,
        tape: &mut Tape,
        fwd: &VideoForward,
        label: &VideoLabel,
        settings: &ForwardSettings,
    ) -> Result<Var> {
        base_loss_on_tape(tape, fwd.cas, fwd.cas_suppressed, label, settings.k_ratio)
    }

    /// Runs the pipeline and returns plain values for localization.
    pub fn infer(&self, fr: &FeatureSequence, ff: &FeatureSequence, settings: &ForwardSettings) -> Result<Inference> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, fr, ff, settings, None)?;
        let row = |v: Var| tape.value(v).as_slice().to_vec();
        let cas_suppressed = Cas::new(tape.value(fwd.cas_suppressed).clone())?;
        let scores = video_scores(&cas_suppressed, settings.k_ratio)?;
        Ok(Inference {
            att_rgb: row(fwd.att_rgb),
            att_flow: row(fwd.att_flow),
            att_fused: row(fwd.att_fused),
            cas: Cas::new(tape.value(fwd.cas).clone())?,
            cas_suppressed,
            video_scores: scores,
            partition: fwd.partition,
            subgraphs: fwd.subgraphs,
        })
    }

    /// Copies parameter values from `other`, which must share names and shapes.
    pub fn load_params(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        for (id, name, value) in other.iter() {
            let (mine, shape) = (self.params.name(id), self.params.get(id).shape());
            if mine != name || shape != value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} is `{name}` {:?}, model expects `{mine}` {shape:?}",
                    id.index(),
                    value.shape()
                )));
            }
        }
        for (id, _, value) in other.iter() {
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// Enhanced features as plain matrices; used by diagnostics and tests.
pub fn enhanced_features(tape: &Tape, fwd: &VideoForward) -> (Matrix, Matrix) {
    (
        tape.value(fwd.enhanced_rgb).clone(),
        tape.value(fwd.enhanced_flow).clone(),
    )
}
