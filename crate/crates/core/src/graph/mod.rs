//! Discriminability-driven snippet graphs.
//!
//! Snippets are pre-classified from both streams' attention into
//! pseudo-action, pseudo-background and ambiguous sets. A cosine-similarity
//! graph, averaged across modalities, is cut into three subgraphs:
//! action↔action, background↔background, and a directed graph in which
//! ambiguous snippets only *receive* from discriminative ones. Graph
//! averaging and a small GCN enhance the features; a consistency loss keeps
//! the GCN output close to the graph average for confident snippets.

mod adjacency;
mod consistency;
mod forward;
mod inference;
mod partition;

pub use adjacency::{
    build_subgraphs, fuse_adjacency, modal_adjacency, AmbiguousGraph, FusedAdjacency, Subgraph, SubgraphSet,
};
pub use consistency::{consistency_weight, feature_consistency_loss};
pub use forward::{ddg_forward, ddg_on_tape, DdgOutput, DdgTapeOutput};
pub use inference::{ambiguous_aggregate, enhance, gcn_forward, gcn_on_tape, graph_average, GcnBranchIds, GcnIds};
pub use partition::{preclassify, SnippetKind, SnippetPartition};

use crate::error::{Error, Result};

/// Graph construction and loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdgHyper {
    /// Action threshold: both streams above `eta` marks a pseudo-action
    /// snippet, both below `1 - eta` a pseudo-background one.
    pub eta: f64,
    /// Off-diagonal similarities below `theta` are dropped.
    pub theta: f64,
    /// Neighbors kept per column after the `theta` filter.
    pub top_k: usize,
    /// Temperature of the consistency weight.
    pub tau: f64,
    /// GCN depth.
    pub layers: usize,
}

impl Default for DdgHyper {
    fn default() -> Self {
        Self {
            eta: 0.5,
            theta: 0.8,
            top_k: 10,
            tau: 0.5,
            layers: 2,
        }
    }
}

impl DdgHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Domain(format!("eta must be in (0, 1), got {}", self.eta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau must be positive, got {}", self.tau)));
        }
        if self.layers == 0 || self.top_k == 0 {
            return Err(Error::Domain("layers and top_k must be at least 1".into()));
        }
        if !self.theta.is_finite() {
            return Err(Error::Domain("theta must be finite".into()));
        }
        Ok(())
    }
}

/// Switches for the ablation grid. `Default` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GraphFlags {
    pub enable_graph_avg: bool,
    pub enable_gcn: bool,
    pub enable_lfc: bool,
    /// Keep ambiguous snippets receive-only. When off, each ambiguous
    /// snippet joins the action or background graph on the side of its fused
    /// attention and sends information like any other node.
    pub disconnect_ambiguity: bool,
    /// Use the cross-modal mean adjacency for both streams. When off, each
    /// stream builds subgraphs from its own similarities.
    pub fuse_adjacency: bool,
}

impl Default for GraphFlags {
    fn default() -> Self {
        Self {
            enable_graph_avg: true,
            enable_gcn: true,
            enable_lfc: true,
            disconnect_ambiguity: true,
            fuse_adjacency: true,
        }
    }
}

impl GraphFlags {
    /// All graph components off: the plain backbone.
    pub fn baseline() -> Self {
        Self {
            enable_graph_avg: false,
            enable_gcn: false,
            enable_lfc: false,
            disconnect_ambiguity: true,
            fuse_adjacency: true,
        }
    }

    pub fn graph_enabled(&self) -> bool {
        self.enable_graph_avg || self.enable_gcn
    }

    pub fn lfc_active(&self) -> bool {
        self.enable_gcn && self.enable_lfc
    }
}
