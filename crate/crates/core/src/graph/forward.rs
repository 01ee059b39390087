//! The full graph stage for one video.

use super::adjacency::{build_subgraphs, fuse_adjacency, modal_adjacency, FusedAdjacency, SubgraphSet};
use super::consistency::{branch_term_on_tape, branch_weights};
use super::inference::{gcn_on_tape, GcnIds};
use super::{preclassify, DdgHyper, GraphFlags, SnippetPartition};
use crate::base_model::{fuse_attention, AttentionSequence, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet, Tape, Var};

/// Recorded outputs of the graph stage.
pub struct DdgTapeOutput {
    /// Enhanced D×T features in original temporal order.
    pub rgb: Var,
    pub flow: Var,
    /// Summed per-stream consistency loss; `None` when the GCN or the loss is off.
    pub loss_fc: Option<Var>,
    /// Pre-classification result.
    pub partition: SnippetPartition,
    /// Partition the subgraphs were built from (differs from `partition`
    /// only when ambiguity is not disconnected).
    pub graph_partition: SnippetPartition,
    /// One shared set with the fused adjacency, or one per stream.
    pub subgraphs: Vec<SubgraphSet>,
}

/// Plain-valued outputs of [`ddg_forward`].
#[derive(Clone, Debug)]
pub struct DdgOutput {
    pub rgb: Matrix,
    pub flow: Matrix,
    pub loss_fc: f64,
    pub partition: SnippetPartition,
    pub graph_partition: SnippetPartition,
    pub subgraphs: Vec<SubgraphSet>,
}

struct BranchOut {
    enhanced: Var,
    gcn: Option<Var>,
    avg: Var,
}

fn mix(tape: &mut Tape, avg: Option<Var>, gcn: Option<Var>) -> Result<Var> {
    Ok(match (avg, gcn) {
        (Some(a), Some(g)) => {
            let s = tape.add(a, g)?;
            tape.scale(s, 0.5)
        }
        (Some(a), None) => a,
        (None, Some(g)) => g,
        (None, None) => unreachable!("graph stage runs only with averaging or GCN enabled"),
    })
}

fn residual(tape: &mut Tape, g: Var, fx: Var) -> Result<Var> {
    let s = tape.add(g, fx)?;
    Ok(tape.scale(s, 0.5))
}

/// Σ over the non-empty parts of `x · block`.
fn blocked_product(tape: &mut Tape, parts: &[(Option<Var>, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(x, block) in parts {
        let Some(x) = x else { continue };
        let term = tape.matmul(x, block)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("ambiguous aggregation with no terms".into()))
}

/// GCN output, graph average, member snippets, and whether the branch is background.
type LfcTerm = (Var, Var, Vec<usize>, bool);

#[allow(clippy::too_many_arguments)]
fn enhance_stream(
    tape: &mut Tape,
    params: &ParamSet,
    gcn_ids: &GcnIds,
    modality: Modality,
    f: Var,
    sets: &SubgraphSet,
    part: &SnippetPartition,
    flags: &GraphFlags,
) -> Result<(Var, Vec<LfcTerm>)> {
    let (d, t) = tape.value(f).shape();

    let branch = |tape: &mut Tape, nodes: &[usize], adj: &Matrix, background: bool| -> Result<Option<BranchOut>> {
        if nodes.is_empty() {
            return Ok(None);
        }
        let fx = tape.gather_cols(f, nodes)?;
        let ax = tape.constant(adj.clone());
        let avg = tape.matmul(fx, ax)?;
        let gcn = if flags.enable_gcn {
            let ids = if background {
                gcn_ids.background(modality)
            } else {
                gcn_ids.action(modality)
            };
            Some(gcn_on_tape(tape, params, ids, fx, ax)?)
        } else {
            None
        };
        let g = mix(tape, flags.enable_graph_avg.then_some(avg), gcn)?;
        let enhanced = residual(tape, g, fx)?;
        Ok(Some(BranchOut { enhanced, gcn, avg }))
    };

    let action = branch(tape, part.action(), &sets.action.adj, false)?;
    let background = branch(tape, part.background(), &sets.background.adj, true)?;

    let mut pieces: Vec<(Var, Vec<usize>)> = Vec::new();
    let mut lfc_inputs = Vec::new();
    for (out, nodes, bg) in [(&action, part.action(), false), (&background, part.background(), true)] {
        if let Some(b) = out {
            pieces.push((b.enhanced, nodes.to_vec()));
            if let Some(g) = b.gcn {
                lfc_inputs.push((g, b.avg, nodes.to_vec(), bg));
            }
        }
    }

    let amb = part.ambiguous();
    if !amb.is_empty() {
        let fm = tape.gather_cols(f, amb)?;
        let am_a = tape.constant(sets.ambiguous.block(part.action()));
        let am_b = tape.constant(sets.ambiguous.block(part.background()));
        let am_m = tape.constant(sets.ambiguous.block(amb));
        let fa = action
            .as_ref()
            .map(|_| tape.gather_cols(f, part.action()))
            .transpose()?;
        let fb = background
            .as_ref()
            .map(|_| tape.gather_cols(f, part.background()))
            .transpose()?;
        let avg = if flags.enable_graph_avg {
            Some(blocked_product(tape, &[(fa, am_a), (fb, am_b), (Some(fm), am_m)])?)
        } else {
            None
        };
        let gcn = if flags.enable_gcn {
            let ga = action.as_ref().and_then(|b| b.gcn);
            let gb = background.as_ref().and_then(|b| b.gcn);
            Some(blocked_product(tape, &[(ga, am_a), (gb, am_b), (Some(fm), am_m)])?)
        } else {
            None
        };
        let g = mix(tape, avg, gcn)?;
        let enhanced = residual(tape, g, fm)?;
        pieces.push((enhanced, amb.to_vec()));
    }
    let out = tape.assemble_cols(&pieces, d, t)?;
    Ok((out, lfc_inputs))
}

/// Records the graph stage for one video.
///
/// `fr` and `ff` are D×T feature nodes already on the tape. `ar` and `af`
/// are the pre-classification attention values; they decide the partition
/// and weight the consistency loss but carry no gradient.
#[allow(clippy::too_many_arguments)]
pub fn ddg_on_tape(
    tape: &mut Tape,
    params: &ParamSet,
    gcn_ids: &GcnIds,
    fr: Var,
    ff: Var,
    ar: &AttentionSequence,
    af: &AttentionSequence,
    hyper: &DdgHyper,
    flags: &GraphFlags,
) -> Result<DdgTapeOutput> {
    hyper.validate()?;
    let (vr, vf) = (tape.value(fr).clone(), tape.value(ff).clone());
    if vr.shape() != vf.shape() || ar.len() != vr.cols() || af.len() != vr.cols() {
        return Err(Error::Shape(format!(
            "rgb {:?}, flow {:?}, attention {} / {}",
            vr.shape(),
            vf.shape(),
            ar.len(),
            af.len()
        )));
    }
    let partition = preclassify(ar, af, hyper.eta)?;
    if !flags.graph_enabled() {
        return Ok(DdgTapeOutput {
            rgb: fr,
            flow: ff,
            loss_fc: None,
            graph_partition: partition.clone(),
            partition,
            subgraphs: Vec::new(),
        });
    }
    let fused_att = fuse_attention(ar, af)?;
    let graph_partition = if flags.disconnect_ambiguity {
        partition.clone()
    } else {
        partition.merge_ambiguous(&fused_att)?
    };

    let rgb_seq = FeatureSequence::new(Modality::Rgb, vr)?;
    let flow_seq = FeatureSequence::new(Modality::Flow, vf)?;
    let adj_r = modal_adjacency(&rgb_seq);
    let adj_f = modal_adjacency(&flow_seq);
    let subgraphs = if flags.fuse_adjacency {
        vec![build_subgraphs(
            &fuse_adjacency(&adj_r, &adj_f)?,
            &graph_partition,
            hyper,
        )?]
    } else {
        vec![
            build_subgraphs(&FusedAdjacency::new(adj_r)?, &graph_partition, hyper)?,
            build_subgraphs(&FusedAdjacency::new(adj_f)?, &graph_partition, hyper)?,
        ]
    };

    let mut enhanced = Vec::with_capacity(2);
    let mut loss_terms = Vec::new();
    for (k, (modality, f)) in [(Modality::Rgb, fr), (Modality::Flow, ff)].into_iter().enumerate() {
        let sets = &subgraphs[k.min(subgraphs.len() - 1)];
        let (out, lfc_inputs) = enhance_stream(tape, params, gcn_ids, modality, f, sets, &graph_partition, flags)?;
        enhanced.push(out);
        if flags.lfc_active() {
            for (gcn, avg, nodes, background) in lfc_inputs {
                let weights = branch_weights(&fused_att, &nodes, background, hyper.tau)?;
                if let Some(term) = branch_term_on_tape(tape, gcn, avg, &weights)? {
                    loss_terms.push(term);
                }
            }
        }
    }
    let loss_fc = if flags.lfc_active() {
        let mut acc = tape.constant(Matrix::zeros(1, 1));
        for term in loss_terms {
            acc = tape.add(acc, term)?;
        }
        Some(acc)
    } else {
        None
    };

    Ok(DdgTapeOutput {
        rgb: enhanced[0],
        flow: enhanced[1],
        loss_fc,
        partition,
        graph_partition,
        subgraphs,
    })
}

/// Runs the graph stage on plain values: pre-classification, adjacency,
/// subgraphs, graph inference and re-assembly in temporal order.
#[allow(clippy::too_many_arguments)]
pub fn ddg_forward(
    fr: &FeatureSequence,
    ff: &FeatureSequence,
    ar: &AttentionSequence,
    af: &AttentionSequence,
    params: &ParamSet,
    gcn_ids: &GcnIds,
    hyper: &DdgHyper,
    flags: &GraphFlags,
) -> Result<DdgOutput> {
    let mut tape = Tape::new();
    let r = tape.constant(fr.values.clone());
    let f = tape.constant(ff.values.clone());
    let out = ddg_on_tape(&mut tape, params, gcn_ids, r, f, ar, af, hyper, flags)?;
    Ok(DdgOutput {
        rgb: tape.value(out.rgb).clone(),
        flow: tape.value(out.flow).clone(),
        loss_fc: out.loss_fc.map_or(0.0, |v| tape.scalar(v)),
        partition: out.partition,
        graph_partition: out.graph_partition,
        subgraphs: out.subgraphs,
    })
}
