//! Named graph-stage variants and the suite that trains and scores them.

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use log::info;

use crate::corpus::{Corpus, Split, Video};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, EvalReport};
use crate::graph::GraphFlags;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Averaging and GCN off: the backbone alone.
    NoGraph,
    /// Graph averaging without the GCN, hence without the consistency loss.
    AvgOnly,
    NoLfc,
    NoDisconnect,
    /// Per-modality adjacency instead of the fused one.
    NoFuse,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoGraph,
        Ablation::AvgOnly,
        Ablation::NoLfc,
        Ablation::NoDisconnect,
        Ablation::NoFuse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGraph => "no-graph",
            Ablation::AvgOnly => "avg-only",
            Ablation::NoLfc => "no-lfc",
            Ablation::NoDisconnect => "no-disconnect",
            Ablation::NoFuse => "no-fuse",
        }
    }

    /// Flags of this variant, starting from `base`.
    pub fn apply(self, base: GraphFlags) -> GraphFlags {
        let mut f = base;
        match self {
            Ablation::Full => {}
            Ablation::NoGraph => return GraphFlags::baseline(),
            Ablation::AvgOnly => f.enable_gcn = false,
            Ablation::NoLfc => f.enable_lfc = false,
            Ablation::NoDisconnect => f.disconnect_ambiguity = false,
            Ablation::NoFuse => f.fuse_adjacency = false,
        }
        f
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config {
                key: "ablation".into(),
                msg: format!("unknown variant `{s}`"),
            })
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub variant: Ablation,
    pub report: EvalReport,
    pub final_total_loss: f64,
    pub elapsed: Duration,
}

fn run_one(
    variant: Ablation,
    corpus: &Corpus,
    train_set: &[&Video],
    test_set: &[&Video],
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<AblationResult> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.settings.flags = variant.apply(cfg.settings.flags);
    let backbone = crate::base_model::BackboneConfig::new(corpus.spec.feature_dim, corpus.spec.num_categories);
    let eval_single = EvalConfig {
        threads: 1,
        ..eval.clone()
    };
    let outcome = train(backbone, train_set, test_set, &cfg, &eval_single, |_| Ok(()))?;
    let report = evaluate(&outcome.model, test_set, &cfg.settings, &eval_single)?;
    let elapsed = start.elapsed();
    info!(
        "{variant}: avg mAP {:.4} in {:.1}s",
        report.average_map(),
        elapsed.as_secs_f64()
    );
    Ok(AblationResult {
        variant,
        report,
        final_total_loss: outcome.log.last().map_or(f64::NAN, |m| m.total),
        elapsed,
    })
}

/// Trains and evaluates every variant on the corpus splits, running up to
/// `threads` variants at once. Results follow the order of `variants`.
pub fn run_suite(
    corpus: &Corpus,
    variants: &[Ablation],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    threads: usize,
) -> Result<Vec<AblationResult>> {
    let train_set: Vec<&Video> = corpus.split(Split::Train).collect();
    let test_set: Vec<&Video> = corpus.split(Split::Test).collect();
    let mut results = Vec::with_capacity(variants.len());
    for batch in variants.chunks(threads.max(1)) {
        let out: Vec<Result<AblationResult>> = thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&v| {
                    let (tr, te) = (&train_set, &test_set);
                    s.spawn(move || run_one(v, corpus, tr, te, cfg, eval))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        });
        for r in out {
            results.push(r?);
        }
    }
    Ok(results)
}

/// `variant,<iou...>,avg,seconds`, one row per variant, mAP values.
pub fn summary_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("variant");
    if let Some(first) = results.first() {
        for t in &first.report.iou_thresholds {
            out.push_str(&format!(",{t:.1}"));
        }
    }
    out.push_str(",avg,seconds\n");
    for r in results {
        out.push_str(r.variant.name());
        for m in &r.report.map {
            out.push_str(&format!(",{m:.6}"));
        }
        out.push_str(&format!(
            ",{:.6},{:.1}\n",
            r.report.average_map(),
            r.elapsed.as_secs_f64()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn flags() {
        let full = GraphFlags::default();
        assert_eq!(Ablation::Full.apply(full), full);
        assert!(!Ablation::NoGraph.apply(full).graph_enabled());
        assert!(!Ablation::AvgOnly.apply(full).lfc_active());
        assert!(!Ablation::NoFuse.apply(full).fuse_adjacency);
    }
}
