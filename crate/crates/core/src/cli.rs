//! Command-line front end.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::ablation::{run_suite, summary_csv, Ablation};
use crate::base_model::BackboneConfig;
use crate::checkpoint::{load_params, save_params};
use crate::config::RunConfig;
use crate::corpus::{generate, Corpus, Split, Video};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, infer_all};
use crate::model::Model;
use crate::trainer::{grad_check, train, GradCheckInstance, GRADCHECK_TOL, METRICS_HEADER};

#[derive(Debug, Parser)]
#[command(
    name = "ddgnet",
    version,
    about = "Graph-enhanced weakly-supervised temporal action localization"
)]
pub struct Cli {
    /// Configuration file (key=value lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ddg.theta=0.7`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Worker threads for evaluation and the ablation suite.
    #[arg(long, default_value_t = 1, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct VariantArg {
    /// Graph-stage variant: full, no-graph, avg-only, no-lfc, no-disconnect, no-fuse.
    #[arg(long, default_value = "full")]
    pub ablate: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch metrics CSV, appended to.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// mAP report CSV; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-video attention CSVs.
        #[arg(long)]
        attention_dir: Option<PathBuf>,
        /// Directory for per-video partition and subgraph dumps.
        #[arg(long, value_name = "DIR")]
        dump_graph: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Train and evaluate every graph-stage variant.
    AblateSuite {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of variants.
        #[arg(long)]
        variants: Option<String>,
    },
    /// Compare analytic and finite-difference gradients on a small instance.
    Gradcheck {
        #[arg(long, default_value_t = 12)]
        snippets: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Print the effective configuration.
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.eval.threads = cli.threads.max(1);
    cfg.validate()?;
    Ok(cfg)
}

fn with_variant(cfg: &RunConfig, v: &VariantArg) -> Result<RunConfig> {
    let variant: Ablation = v.ablate.parse()?;
    let mut cfg = cfg.clone();
    cfg.train.settings.flags = variant.apply(cfg.train.settings.flags);
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn backbone_of(corpus: &Corpus) -> BackboneConfig {
    BackboneConfig::new(corpus.spec.feature_dim, corpus.spec.num_categories)
}

fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, ckpt: &Path, metrics: Option<&Path>) -> Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let train_set: Vec<&Video> = corpus.split(Split::Train).collect();
    let test_set: Vec<&Video> = corpus.split(Split::Test).collect();
    let mut log_file = match metrics {
        Some(p) => {
            let fresh = !p.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(p, e))?;
            }
            Some((f, p.to_path_buf()))
        }
        None => None,
    };
    let outcome = train(
        backbone_of(&corpus),
        &train_set,
        &test_set,
        &cfg.train,
        &cfg.eval,
        |m| {
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", m.csv_line()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            Ok(())
        },
    )?;
    save_params(&outcome.model.params, ckpt)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs: base {:.5} lfc {:.5} total {:.5}",
            last.epoch, last.base_loss, last.lfc, last.total
        );
    }
    Ok(())
}

fn load_model(corpus: &Corpus, cfg: &RunConfig, ckpt: &Path) -> Result<Model> {
    let params = load_params(ckpt)?;
    let mut model = Model::new(backbone_of(corpus), cfg.train.settings.hyper.layers, 0);
    model.load_params(&params)?;
    Ok(model)
}

fn attention_csv(inf: &crate::model::Inference) -> String {
    let mut s = String::from("t,att_rgb,att_flow,att_fused,partition\n");
    for t in 0..inf.att_fused.len() {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{}",
            t + 1,
            inf.att_rgb[t],
            inf.att_flow[t],
            inf.att_fused[t],
            inf.partition.kinds()[t].tag()
        );
    }
    s
}

fn graph_dump(inf: &crate::model::Inference) -> String {
    if inf.subgraphs.is_empty() {
        let tags: Vec<&str> = inf.partition.kinds().iter().map(|k| k.tag()).collect();
        return format!("partition {}\ngraph stage disabled\n", tags.join(","));
    }
    let mut s = String::new();
    for (k, sg) in inf.subgraphs.iter().enumerate() {
        if inf.subgraphs.len() > 1 {
            let _ = writeln!(s, "stream {}", ["rgb", "flow"][k]);
        }
        s.push_str(&sg.debug_dump(&inf.partition));
    }
    s
}

fn cmd_eval(
    cfg: &RunConfig,
    corpus_dir: &Path,
    ckpt: &Path,
    report_path: Option<&Path>,
    attention_dir: Option<&Path>,
    dump_graph: Option<&Path>,
) -> Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let model = load_model(&corpus, cfg, ckpt)?;
    let settings = &cfg.train.settings;
    let test_set: Vec<&Video> = corpus.split(Split::Test).collect();

    if attention_dir.is_some() || dump_graph.is_some() {
        let inferences = infer_all(&model, &test_set, settings, cfg.eval.threads)?;
        for (v, inf) in test_set.iter().zip(&inferences) {
            if let Some(dir) = attention_dir {
                write_file(&dir.join(format!("{}.csv", v.id)), &attention_csv(inf))?;
            }
            if let Some(dir) = dump_graph {
                write_file(&dir.join(format!("{}.txt", v.id)), &graph_dump(inf))?;
            }
        }
    }

    let report = evaluate(&model, &test_set, settings, &cfg.eval)?;
    match report_path {
        Some(p) => {
            write_file(p, &report.to_csv())?;
            println!("average mAP {:.4}", report.average_map());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_suite(cfg: &RunConfig, corpus_dir: &Path, out: &Path, variants: Option<&str>, threads: usize) -> Result<()> {
    let corpus = Corpus::load(corpus_dir)?;
    let variants: Vec<Ablation> = match variants {
        Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
        None => Ablation::ALL.to_vec(),
    };
    let results = run_suite(&corpus, &variants, &cfg.train, &cfg.eval, threads)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for r in &results {
        write_file(&out.join(format!("{}.csv", r.variant)), &r.report.to_csv())?;
    }
    let summary = summary_csv(&results);
    write_file(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Runs the parsed command; the returned code is the process exit status.
pub fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Gen { out } => {
            let corpus = generate(&cfg.corpus)?;
            corpus.write(out)?;
            println!("wrote {} videos to {}", corpus.videos.len(), out.display());
        }
        Command::Train {
            corpus,
            checkpoint,
            metrics,
            variant,
        } => {
            let cfg = with_variant(&cfg, variant)?;
            cmd_train(&cfg, corpus, checkpoint, metrics.as_deref())?;
        }
        Command::Eval {
            corpus,
            checkpoint,
            report,
            attention_dir,
            dump_graph,
            variant,
        } => {
            let cfg = with_variant(&cfg, variant)?;
            cmd_eval(
                &cfg,
                corpus,
                checkpoint,
                report.as_deref(),
                attention_dir.as_deref(),
                dump_graph.as_deref(),
            )?;
        }
        Command::AblateSuite { corpus, out, variants } => {
            cmd_suite(&cfg, corpus, out, variants.as_deref(), cli.threads)?;
        }
        Command::Gradcheck {
            snippets,
            dim,
            classes,
            variant,
            inject_bug,
        } => {
            let cfg = with_variant(&cfg, variant)?;
            let inst = GradCheckInstance {
                snippets: *snippets,
                feature_dim: *dim,
                num_classes: *classes,
                seed: cfg.train.seed,
            };
            let report = grad_check(&cfg.train, &inst, *inject_bug)?;
            let pass = report.passes(GRADCHECK_TOL);
            let worst = report
                .worst
                .as_ref()
                .map_or(String::new(), |(n, i)| format!(" at {n}[{i}]"));
            println!(
                "{} max relative error {:.3e}{worst} over {} entries",
                if pass { "PASS" } else { "FAIL" },
                report.max_rel_error,
                report.entries_checked
            );
            if !pass {
                warn!("gradient check exceeded tolerance {GRADCHECK_TOL:e}");
                return Ok(1);
            }
        }
        Command::PrintConfig => print!("{}", cfg.to_text()),
    }
    info!("done");
    Ok(0)
}
