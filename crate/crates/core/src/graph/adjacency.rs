//! Similarity graphs and the masked, sparsified, column-normalized subgraphs.

use std::fmt::Write as _;

use log::warn;

use super::{DdgHyper, SnippetPartition};
use crate::base_model::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix};

/// Cosine similarity between every pair of snippets of one stream.
///
/// A zero-norm snippet is similar to nothing but itself.
pub fn modal_adjacency(f: &FeatureSequence) -> Matrix {
    let (d, t) = f.values.shape();
    let mut unit = f.values.clone();
    for c in 0..t {
        let norm = (0..d).map(|r| f.values[(r, c)].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..d {
                unit[(r, c)] /= norm;
            }
        } else {
            warn!(
                "{} snippet {c} has zero norm; treating it as isolated",
                f.modality.name()
            );
        }
    }
    let mut gram = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i..t {
            let s = if i == j {
                1.0
            } else {
                (0..d)
                    .map(|r| unit[(r, i)] * unit[(r, j)])
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            };
            gram[(i, j)] = s;
            gram[(j, i)] = s;
        }
    }
    gram
}

/// Symmetric T×T similarity with entries in [−1, 1] and unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedAdjacency {
    values: Matrix,
}

impl FusedAdjacency {
    /// Wraps a single similarity matrix, checking the invariants.
    pub fn new(values: Matrix) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c {
            return Err(Error::Shape(format!("adjacency must be square, got {r}x{c}")));
        }
        if !values.is_symmetric(0.0) {
            return Err(Error::Domain("adjacency must be symmetric".into()));
        }
        if values.as_slice().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::Domain("similarities must lie in [-1, 1]".into()));
        }
        if (0..r).any(|i| values[(i, i)] != 1.0) {
            return Err(Error::Domain("adjacency diagonal must be 1".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }
}

/// Elementwise mean of the two streams' similarity matrices.
pub fn fuse_adjacency(arj: &Matrix, afj: &Matrix) -> Result<FusedAdjacency> {
    let fused = arj.zip_with(afj, "fuse_adjacency", |a, b| (a + b) / 2.0)?;
    FusedAdjacency::new(fused)
}

/// A square subgraph over `nodes` (global positions, ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub nodes: Vec<usize>,
    /// Column-stochastic |nodes|×|nodes| weights.
    pub adj: Matrix,
    /// Surviving entries per column, self included.
    pub survivors: Vec<usize>,
}

/// Directed receive-only graph for ambiguous snippets.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbiguousGraph {
    /// Ambiguous positions, one column each.
    pub nodes: Vec<usize>,
    /// Column-stochastic T×|nodes| weights; row i is global position i.
    pub adj: Matrix,
    pub survivors: Vec<usize>,
}

impl AmbiguousGraph {
    /// Rows of the weight matrix for the listed global positions.
    pub fn block(&self, rows: &[usize]) -> Matrix {
        let cols: Vec<usize> = (0..self.nodes.len()).collect();
        self.adj.submatrix(rows, &cols)
    }
}

/// The three subgraphs built from one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphSet {
    pub action: Subgraph,
    pub background: Subgraph,
    pub ambiguous: AmbiguousGraph,
}

impl SubgraphSet {
    /// Largest deviation of any column sum from 1.
    pub fn max_column_sum_error(&self) -> f64 {
        [&self.action.adj, &self.background.adj, &self.ambiguous.adj]
            .iter()
            .flat_map(|m| m.column_sums())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Human-readable listing of the partition, survivors and column sums.
    pub fn debug_dump(&self, partition: &SnippetPartition) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "snippets {}", partition.len());
        let tags: Vec<&str> = partition.kinds().iter().map(|k| k.tag()).collect();
        let _ = writeln!(out, "partition {}", tags.join(","));
        let list = |v: &[usize]| v.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "action {}", list(partition.action()));
        let _ = writeln!(out, "background {}", list(partition.background()));
        let _ = writeln!(out, "ambiguous {}", list(partition.ambiguous()));
        let sections: [(&str, &[usize], &[usize], &Matrix); 3] = [
            ("action", &self.action.nodes, &self.action.survivors, &self.action.adj),
            (
                "background",
                &self.background.nodes,
                &self.background.survivors,
                &self.background.adj,
            ),
            (
                "ambiguous",
                &self.ambiguous.nodes,
                &self.ambiguous.survivors,
                &self.ambiguous.adj,
            ),
        ];
        for (name, nodes, survivors, adj) in sections {
            let sums = adj.column_sums();
            for (k, &node) in nodes.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{name} column {} survivors {} sum {:.12}",
                    node + 1,
                    survivors[k],
                    sums[k]
                );
            }
        }
        let _ = writeln!(out, "max_column_sum_error {:.3e}", self.max_column_sum_error());
        out
    }
}

/// Keeps the self entry plus the `top_k` largest off-diagonal candidates
/// with similarity at least `theta`, then softmaxes over the survivors.
/// Returns (row, weight) pairs and the survivor count.
fn sparsify_column(
    candidates: impl Iterator<Item = (usize, f64)>,
    self_row: usize,
    self_value: f64,
    hyper: &DdgHyper,
) -> Vec<(usize, f64)> {
    let mut kept: Vec<(usize, f64)> = candidates.filter(|&(_, v)| v >= hyper.theta).collect();
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(hyper.top_k);
    kept.push((self_row, self_value));
    let values: Vec<f64> = kept.iter().map(|&(_, v)| v).collect();
    let weights = softmax(&values);
    kept.iter().zip(weights).map(|(&(row, _), w)| (row, w)).collect()
}

fn discriminative_subgraph(adj: &Matrix, nodes: &[usize], hyper: &DdgHyper) -> Subgraph {
    let n = nodes.len();
    let mut out = Matrix::zeros(n, n);
    let mut survivors = Vec::with_capacity(n);
    for j in 0..n {
        let candidates = (0..n).filter(|&i| i != j).map(|i| (i, adj[(nodes[i], nodes[j])]));
        let kept = sparsify_column(candidates, j, adj[(nodes[j], nodes[j])], hyper);
        survivors.push(kept.len());
        for (i, w) in kept {
            out[(i, j)] = w;
        }
    }
    Subgraph {
        nodes: nodes.to_vec(),
        adj: out,
        survivors,
    }
}

/// Builds the action, background and ambiguous subgraphs.
///
/// Action and background graphs restrict the similarity to their own node
/// sets. Column j of the ambiguous graph may only draw from discriminative
/// rows plus its own self entry (weight 1 before normalization). In every
/// matrix, off-diagonal entries under `theta` are dropped, at most `top_k`
/// remain per column, and a softmax over the survivors normalizes each
/// column; dropped entries stay exactly 0.
pub fn build_subgraphs(adj: &FusedAdjacency, part: &SnippetPartition, hyper: &DdgHyper) -> Result<SubgraphSet> {
    let t = adj.len();
    if part.len() != t {
        return Err(Error::Shape(format!(
            "partition covers {} snippets, adjacency {t}",
            part.len()
        )));
    }
    let a = adj.matrix();
    let action = discriminative_subgraph(a, part.action(), hyper);
    let background = discriminative_subgraph(a, part.background(), hyper);

    let amb = part.ambiguous();
    let mut m = Matrix::zeros(t, amb.len());
    let mut survivors = Vec::with_capacity(amb.len());
    let discriminative: Vec<usize> = {
        let mut v: Vec<usize> = part.action().iter().chain(part.background()).copied().collect();
        v.sort_unstable();
        v
    };
    for (col, &j) in amb.iter().enumerate() {
        let candidates = discriminative.iter().map(|&i| (i, a[(i, j)]));
        let kept = sparsify_column(candidates, j, 1.0, hyper);
        survivors.push(kept.len());
        for (i, w) in kept {
            m[(i, col)] = w;
        }
    }
    Ok(SubgraphSet {
        action,
        background,
        ambiguous: AmbiguousGraph {
            nodes: amb.to_vec(),
            adj: m,
            survivors,
        },
    })
}
