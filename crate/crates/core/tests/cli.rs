use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alpkd::config::RunConfigFile;
use alpkd::encoder::{save_checkpoint, Encoder};
use alpkd::trainer::RunRecord;

const TOY: &str = r#"
[task]
name = "toy"
kind = "PARITY"
vocab_size = 8
seq_len = 8
train_size = 48
valid_size = 24
seed = 3
max_markers = 3

[teacher]
num_layers = 12
hidden_dim = 8
num_heads = 2
ffn_dim = 16
vocab_size = 8
max_seq_len = 8

[teacher_train]
epochs = 1
seed = 5
batch_size = 16

[student]
num_layers = 4

[train]
epochs = 2
eta = 0.2
lambda = 0.5
temperature = 5.0
batch_size = 16
seed = 9

[grid]
learning_rates = [1e-3]
etas = [0.2]
lambdas = [0.2, 0.7]
temperatures = [5.0]
strategies = ["nkd", "alp-full"]
"#;

fn alpkd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alpkd"))
        .args(args)
        .env("ALPKD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let out = stdout(o);
    let line = out.lines().find(|l| l.starts_with("run_dir ")).expect("run_dir line");
    PathBuf::from(line.trim_start_matches("run_dir "))
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    teacher: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("toy.toml");
        std::fs::write(&config, TOY).unwrap();
        let out = alpkd(&["train-teacher", config.to_str().unwrap()], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
        let teacher = run_dir(&out).join("teacher.ckpt");
        Self { dir, config, teacher }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn distill(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "distill",
            self.config.to_str().unwrap(),
            "--teacher-checkpoint",
            self.teacher.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        alpkd(&args, self.root())
    }
}

#[test]
fn twelve_to_four_alp_full_writes_record_and_checkpoint() {
    let fx = Fixture::new();
    let out = fx.distill(&["--strategy", "alp-full"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(&out);
    assert!(dir.starts_with(fx.root()));
    for f in ["config.toml", "metrics.json", "timing.json", "student.ckpt", "fusion.json"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(record.encoder.num_layers, 4);
    assert_eq!(record.checkpoint.as_deref(), Some("student.ckpt"));
    assert!(record.teacher_unchanged());
    assert!(!record.epochs[0].alpha.is_empty());
    let saved = RunConfigFile::load(&dir.join("config.toml")).unwrap();
    assert_eq!(saved.student.num_layers, 4);
    assert!(saved.student.teacher_checkpoint.unwrap().is_absolute());
}

#[test]
fn metrics_are_byte_identical_across_reruns() {
    let fx = Fixture::new();
    let a = fx.distill(&["--strategy", "pkd"]);
    let b = fx.distill(&["--strategy", "pkd"]);
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_ne!(da, db);
    let ma = std::fs::read(da.join("metrics.json")).unwrap();
    let mb = std::fs::read(db.join("metrics.json")).unwrap();
    assert_eq!(ma, mb);
    assert!(!String::from_utf8(ma).unwrap().contains("wall_clock"));

    // the saved effective config reproduces the run on its own
    let c = alpkd(&["distill", da.join("config.toml").to_str().unwrap()], fx.root());
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(std::fs::read(run_dir(&c).join("metrics.json")).unwrap(), std::fs::read(da.join("metrics.json")).unwrap());
}

#[test]
fn unknown_strategy_lists_valid_names() {
    let fx = Fixture::new();
    let out = fx.distill(&["--strategy", "alp-half"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("nkd|rkd|pkd|ckd-no|ckd-po|alp-no|alp-po|alp-full"));
}

#[test]
fn analyze_modes_and_concatenation_refusal() {
    let fx = Fixture::new();
    let alp = run_dir(&fx.distill(&["--strategy", "alp-no"]));
    let out = alpkd(&["analyze", "--run-dir", alp.to_str().unwrap(), "--mode", "attention"], fx.root());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(alp.join("attention_s1.csv")).unwrap();
    assert!(text.starts_with("example_id,j,k,alpha"));
    // bucket {1..4} for student layer 1, 10 examples
    assert_eq!(text.lines().count(), 1 + 10 * 4);
    for mode in ["pca", "cosine"] {
        let out = alpkd(&["analyze", "--run-dir", alp.to_str().unwrap(), "--mode", mode], fx.root());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let cos = std::fs::read_to_string(alp.join("cosine.csv")).unwrap();
    assert!(cos.starts_with("example_id,pair,distance,flagged"));
    // 24 validation examples, 4 x 12 layer pairs
    assert_eq!(cos.lines().count(), 1 + 24 * 48);

    let ckd = run_dir(&fx.distill(&["--strategy", "ckd-po"]));
    let out = alpkd(&["analyze", "--run-dir", ckd.to_str().unwrap(), "--mode", "attention"], fx.root());
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("no attention weights"));
}

#[test]
fn fusion_override_selects_kqv() {
    let fx = Fixture::new();
    let out = fx.distill(&["--strategy", "alp-po", "--fusion", "kqv", "--fusion-heads", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(run_dir(&out).join("fusion.json")).unwrap();
    assert!(text.contains("ALP_KQV"));
    let bad = fx.distill(&["--strategy", "pkd", "--fusion", "dot"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn grid_writes_table_and_best() {
    let fx = Fixture::new();
    let out = alpkd(
        &[
            "grid",
            fx.config.to_str().unwrap(),
            "--teacher-checkpoint",
            fx.teacher.to_str().unwrap(),
            "--workers",
            "2",
        ],
        fx.root(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = run_dir(&out);
    let csv = std::fs::read_to_string(dir.join("grid.csv")).unwrap();
    // nkd: 1 cell; alp-full: 2 lambdas
    assert_eq!(csv.lines().count(), 1 + 3);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["best"].as_array().unwrap().len(), 2);
    let bad = alpkd(
        &["grid", fx.config.to_str().unwrap(), "--teacher-checkpoint", fx.teacher.to_str().unwrap(), "--strategies", "rkd,foo"],
        fx.root(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn strict_config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, TOY.replace("eta = 0.2", "etaa = 0.2")).unwrap();
    let out = alpkd(&["train-teacher", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("etaa"));

    std::fs::write(&path, TOY.replace("eta = 0.2\nlambda = 0.5", "eta = 0.7\nlambda = 0.7")).unwrap();
    let out = alpkd(&["train-teacher", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn effective_config_round_trips() {
    let cfg = RunConfigFile::parse(TOY).unwrap();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfigFile::parse(&text).unwrap(), cfg);
    for key in ["dropout_rate", "layer_norm_eps", "eval_batch_size", "include_last", "kd_t_squared"] {
        assert!(text.contains(key), "default {key} not materialized");
    }
    assert_eq!(cfg.hash().unwrap(), RunConfigFile::parse(&text).unwrap().hash().unwrap());
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = alpkd(&["train-teacher", "/nonexistent/cfg.toml"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "io");

    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY).unwrap();
    let out = alpkd(
        &["distill", config.to_str().unwrap(), "--teacher-checkpoint", "/nonexistent/t.ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn nan_teacher_exits_with_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY).unwrap();
    let cfg = RunConfigFile::parse(TOY).unwrap();
    let teacher = Encoder::<f64>::new(cfg.teacher.clone(), 1).unwrap();
    let ckpt = dir.path().join("nan.ckpt");
    save_checkpoint(&teacher, &ckpt).unwrap();
    // the last parameter block is the classifier bias
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = alpkd(&["distill", config.to_str().unwrap(), "--teacher-checkpoint", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert_eq!(error_json(&out)["error"], "divergence");
}

#[test]
fn accuracy_floor_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY.replace("[teacher_train]\n", "[teacher_train]\naccuracy_floor = 1.0\n")).unwrap();
    let out = alpkd(&["train-teacher", config.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "accuracy-floor");
    // artifacts are still written for inspection
    assert!(run_dir(&out).join("teacher.ckpt").is_file());
}
