use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ddgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddgnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DDG_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "corpus.num_train=3",
    "--set",
    "corpus.num_test=2",
    "--set",
    "train.epochs=2",
    "--set",
    "corpus.snippets=40",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = TINY.to_vec();
    v.extend_from_slice(args);
    v
}

#[test]
fn configuration_errors_exit_3() {
    assert_eq!(code(&ddgnet(&["--set", "ddg.nonsense=1", "print-config"])), 3);
    assert_eq!(code(&ddgnet(&["--set", "ddg.theta", "print-config"])), 3);
    assert_eq!(code(&ddgnet(&["--set", "train.epochs=abc", "print-config"])), 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "[ddg]\neta = 0.55\nbogus = 1\n").unwrap();
    assert_eq!(code(&ddgnet(&["--config", p(&cfg), "print-config"])), 3);
}

#[test]
fn config_file_and_overrides_reach_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tuned\n[ddg]\neta = 0.55\n").unwrap();
    let out = ddgnet(&["--config", p(&cfg), "--set", "train.epochs=7", "print-config"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("eta=0.55"), "{text}");
    assert!(text.contains("epochs=7"), "{text}");
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddgnet(&[
        "train",
        "--corpus",
        p(&dir.path().join("nowhere")),
        "--checkpoint",
        "x.ckpt",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert_eq!(
        code(&ddgnet(&[
            "--config",
            p(&dir.path().join("absent.cfg")),
            "print-config"
        ])),
        2
    );
}

#[test]
fn gen_train_eval_and_checkpoint_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let ckpt = dir.path().join("model.ckpt");
    let metrics = dir.path().join("metrics.csv");
    let report = dir.path().join("report.csv");
    let att = dir.path().join("att");
    let graphs = dir.path().join("graphs");

    assert_eq!(code(&ddgnet(&with_tiny(&["gen", "--out", p(&corpus)]))), 0);
    let train = with_tiny(&[
        "train",
        "--corpus",
        p(&corpus),
        "--checkpoint",
        p(&ckpt),
        "--metrics",
        p(&metrics),
    ]);
    assert_eq!(code(&ddgnet(&train)), 0);
    let log = fs::read_to_string(&metrics).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,base_loss,lfc,total,map_avg"));
    assert_eq!(log.lines().count(), 3);

    let eval = [
        "eval",
        "--corpus",
        p(&corpus),
        "--checkpoint",
        p(&ckpt),
        "--report",
        p(&report),
        "--attention-dir",
        p(&att),
        "--dump-graph",
        p(&graphs),
    ];
    assert_eq!(code(&ddgnet(&with_tiny(&eval))), 0);
    let csv = fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("category,0.1,0.2,0.3,0.4,0.5,0.6,0.7,Avg"));
    let att_csv = fs::read_to_string(att.join("video_0003.csv")).unwrap();
    assert_eq!(att_csv.lines().next(), Some("t,att_rgb,att_flow,att_fused,partition"));
    assert_eq!(att_csv.lines().count(), 41);
    let dump = fs::read_to_string(graphs.join("video_0003.txt")).unwrap();
    assert!(dump.contains("partition "), "{dump}");

    // A model with a different GCN depth cannot take this checkpoint.
    let mut deeper = with_tiny(&["--set", "ddg.layers=3"]);
    deeper.extend_from_slice(&eval[..5]);
    assert_eq!(code(&ddgnet(&deeper)), 5);

    // Corrupted checkpoint bytes are a format error.
    let bytes = fs::read(&ckpt).unwrap();
    fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&ddgnet(&with_tiny(&eval[..5]))), 2);
}

#[test]
fn gradcheck_reports_pass_and_detects_a_broken_gradient() {
    let ok = ddgnet(&["gradcheck", "--snippets", "12", "--dim", "8", "--classes", "3"]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("PASS"));
    let bad = ddgnet(&["gradcheck", "--inject-bug"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).starts_with("FAIL"));
    assert_eq!(code(&ddgnet(&["gradcheck", "--ablate", "sideways"])), 3);
}
