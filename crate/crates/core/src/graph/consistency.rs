//! Feature consistency loss.

use super::SnippetPartition;
use crate::base_model::AttentionSequence;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// `exp(−(1/x − 1)/τ)` for `x` in (0, 1].
pub fn consistency_weight(x: f64, tau: f64) -> Result<f64> {
    if !(x > 0.0) || x > 1.0 {
        return Err(Error::Domain(format!("consistency weight needs x in (0, 1], got {x}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    Ok((-(1.0 / x - 1.0) / tau).exp())
}

/// Per-snippet weights for the action term (`w(A_t)`) or the background
/// term (`w(1 − A_t)`).
pub(crate) fn branch_weights(att: &AttentionSequence, nodes: &[usize], background: bool, tau: f64) -> Result<Vec<f64>> {
    nodes
        .iter()
        .map(|&t| {
            let a = att.as_slice()[t];
            consistency_weight(if background { 1.0 - a } else { a }, tau)
        })
        .collect()
}

/// Weighted mean euclidean distance between `gcn` and `avg` columns, recorded
/// on the tape. Returns `None` for an empty branch.
pub(crate) fn branch_term_on_tape(tape: &mut Tape, gcn: Var, avg: Var, weights: &[f64]) -> Result<Option<Var>> {
    if weights.is_empty() {
        return Ok(None);
    }
    let diff = tape.sub(gcn, avg)?;
    let norms = tape.col_norms(diff);
    let w = tape.constant(Matrix::row_vector(weights)?);
    let weighted = tape.mul(norms, w)?;
    let total = tape.sum(weighted);
    Ok(Some(tape.scale(total, 1.0 / weights.len() as f64)))
}

/// Consistency loss for one stream. `gcn_feats` and `avg_feats` are D×T in
/// global snippet order; only pseudo-action and pseudo-background columns
/// contribute, and an empty set contributes 0.
pub fn feature_consistency_loss(
    part: &SnippetPartition,
    att: &AttentionSequence,
    gcn_feats: &Matrix,
    avg_feats: &Matrix,
    tau: f64,
) -> Result<f64> {
    if gcn_feats.shape() != avg_feats.shape() || gcn_feats.cols() != part.len() || att.len() != part.len() {
        return Err(Error::Shape(format!(
            "gcn {:?}, avg {:?}, partition {}, attention {}",
            gcn_feats.shape(),
            avg_feats.shape(),
            part.len(),
            att.len()
        )));
    }
    let mut tape = Tape::new();
    let mut loss = 0.0;
    for (nodes, background) in [(part.action(), false), (part.background(), true)] {
        let weights = branch_weights(att, nodes, background, tau)?;
        let g = tape.constant(gcn_feats.select_columns(nodes));
        let a = tape.constant(avg_feats.select_columns(nodes));
        if let Some(term) = branch_term_on_tape(&mut tape, g, a, &weights)? {
            loss += tape.scalar(term);
        }
    }
    Ok(loss)
}
