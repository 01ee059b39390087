//! Flat `key=value` run configuration.
//!
//! Lines starting with `#` are comments. Keys are dotted (`ddg.theta`); a
//! `[section]` line prefixes the keys that follow it. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::trainer::TrainConfig;

/// Environment variable that overrides the training seed.
pub const SEED_ENV: &str = "DDG_SEED";

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            msg: format!("expected true or false, got `{value}`"),
        }),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (c, t, e) = (&mut self.corpus, &mut self.train, &mut self.eval);
        let h = &mut t.settings.hyper;
        let f = &mut t.settings.flags;
        match key {
            "seed" => t.seed = parse(key, value)?,
            "corpus.num_categories" => c.num_categories = parse(key, value)?,
            "corpus.feature_dim" => c.feature_dim = parse(key, value)?,
            "corpus.num_train" => c.num_train = parse(key, value)?,
            "corpus.num_test" => c.num_test = parse(key, value)?,
            "corpus.snippets" => c.snippets = parse(key, value)?,
            "corpus.min_segments" => c.min_segments = parse(key, value)?,
            "corpus.max_segments" => c.max_segments = parse(key, value)?,
            "corpus.min_segment_len" => c.min_segment_len = parse(key, value)?,
            "corpus.max_segment_len" => c.max_segment_len = parse(key, value)?,
            "corpus.boundary_width" => c.boundary_width = parse(key, value)?,
            "corpus.noise_scale" => c.noise_scale = parse(key, value)?,
            "corpus.disagreement_prob" => c.disagreement_prob = parse(key, value)?,
            "corpus.seed" => c.seed = parse(key, value)?,
            "ddg.eta" => h.eta = parse(key, value)?,
            "ddg.theta" => h.theta = parse(key, value)?,
            "ddg.top_k" => h.top_k = parse(key, value)?,
            "ddg.tau" => h.tau = parse(key, value)?,
            "ddg.layers" => h.layers = parse(key, value)?,
            "ablation.graph_avg" => f.enable_graph_avg = parse_bool(key, value)?,
            "ablation.gcn" => f.enable_gcn = parse_bool(key, value)?,
            "ablation.lfc" => f.enable_lfc = parse_bool(key, value)?,
            "ablation.disconnect_ambiguity" => f.disconnect_ambiguity = parse_bool(key, value)?,
            "ablation.fuse_adjacency" => f.fuse_adjacency = parse_bool(key, value)?,
            "train.lambda1" => t.lambda1 = parse(key, value)?,
            "train.lambda2" => t.lambda2 = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.k_ratio" => t.settings.k_ratio = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.eval_every" => t.eval_every = parse(key, value)?,
            "eval.iou_thresholds" => e.iou_thresholds = parse_list(key, value)?,
            "eval.num_att_thresholds" => e.num_att_thresholds = parse(key, value)?,
            "eval.att_threshold_low" => e.att_threshold_low = parse(key, value)?,
            "eval.att_threshold_high" => e.att_threshold_high = parse(key, value)?,
            "eval.outer_ratio" => e.outer_ratio = parse(key, value)?,
            "eval.accept_cut" => e.accept_cut = parse(key, value)?,
            "eval.nms_iou" => e.nms_iou = parse(key, value)?,
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies every line of a config text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", n + 1),
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                key: key.into(),
                msg: e.to_string(),
            })
        };
        wrap("corpus", self.corpus.validate())?;
        wrap("train", self.train.validate())?;
        wrap("eval", self.eval.validate())
    }

    /// Every key with its effective value, in a form `apply_text` accepts.
    pub fn to_text(&self) -> String {
        let (c, t, e) = (&self.corpus, &self.train, &self.eval);
        let (h, f) = (&t.settings.hyper, &t.settings.flags);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", t.seed.to_string());
        kv("corpus.num_categories", c.num_categories.to_string());
        kv("corpus.feature_dim", c.feature_dim.to_string());
        kv("corpus.num_train", c.num_train.to_string());
        kv("corpus.num_test", c.num_test.to_string());
        kv("corpus.snippets", c.snippets.to_string());
        kv("corpus.min_segments", c.min_segments.to_string());
        kv("corpus.max_segments", c.max_segments.to_string());
        kv("corpus.min_segment_len", c.min_segment_len.to_string());
        kv("corpus.max_segment_len", c.max_segment_len.to_string());
        kv("corpus.boundary_width", c.boundary_width.to_string());
        kv("corpus.noise_scale", format!("{:?}", c.noise_scale));
        kv("corpus.disagreement_prob", format!("{:?}", c.disagreement_prob));
        kv("corpus.seed", c.seed.to_string());
        kv("ddg.eta", format!("{:?}", h.eta));
        kv("ddg.theta", format!("{:?}", h.theta));
        kv("ddg.top_k", h.top_k.to_string());
        kv("ddg.tau", format!("{:?}", h.tau));
        kv("ddg.layers", h.layers.to_string());
        kv("ablation.graph_avg", f.enable_graph_avg.to_string());
        kv("ablation.gcn", f.enable_gcn.to_string());
        kv("ablation.lfc", f.enable_lfc.to_string());
        kv("ablation.disconnect_ambiguity", f.disconnect_ambiguity.to_string());
        kv("ablation.fuse_adjacency", f.fuse_adjacency.to_string());
        kv("train.lambda1", format!("{:?}", t.lambda1));
        kv("train.lambda2", format!("{:?}", t.lambda2));
        kv("train.learning_rate", format!("{:?}", t.learning_rate));
        kv("train.epochs", t.epochs.to_string());
        kv("train.k_ratio", format!("{:?}", t.settings.k_ratio));
        kv("train.beta1", format!("{:?}", t.beta1));
        kv("train.beta2", format!("{:?}", t.beta2));
        kv("train.adam_eps", format!("{:?}", t.adam_eps));
        kv("train.eval_every", t.eval_every.to_string());
        let ious: Vec<String> = e.iou_thresholds.iter().map(|v| format!("{v:?}")).collect();
        kv("eval.iou_thresholds", ious.join(","));
        kv("eval.num_att_thresholds", e.num_att_thresholds.to_string());
        kv("eval.att_threshold_low", format!("{:?}", e.att_threshold_low));
        kv("eval.att_threshold_high", format!("{:?}", e.att_threshold_high));
        kv("eval.outer_ratio", format!("{:?}", e.outer_ratio));
        kv("eval.accept_cut", format!("{:?}", e.accept_cut));
        kv("eval.nms_iou", format!("{:?}", e.nms_iou));
        s
    }
}
