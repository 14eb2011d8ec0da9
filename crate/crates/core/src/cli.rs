//! The `alpkd` command line: `train-teacher`, `distill`, `grid` and
//! `analyze`, each writing into a fresh run directory.
//!
//! Failures print one JSON line to stderr,
//! `{"error":"<category>","exit_code":N,"message":"..."}`, and exit with
//! 2 (config), 3 (divergence), 4 (I/O or file format) or 5 (accuracy floor
//! missed).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{cls_states, cosine_distance_report, dump_attention, pair_label, pca_project};
use crate::config::{Precision, RunConfigFile};
use crate::data::{build_task, TaskData};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionFile, FusionKind};
use crate::scalar::Scalar;
use crate::trainer::{
    available_workers, distill_cached, grid_search, seed_sweep, train_teacher, write_grid_csv, GridRow, RunRecord,
    SkippedCell, StrategyName, TeacherOutputs,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const FUSION_FILE: &str = "fusion.json";

#[derive(Debug, Parser)]
#[command(name = "alpkd", version, about = "Knowledge distillation with attention-based layer projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a teacher encoder from scratch.
    TrainTeacher {
        config: PathBuf,
        /// Parent directory for the run (overrides the config and environment).
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Distill a student from a trained teacher.
    Distill {
        config: PathBuf,
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        /// nkd|rkd|pkd|ckd-no|ckd-po|alp-no|alp-po|alp-full. nkd also sets
        /// eta = lambda = 0 and rkd sets lambda = 0.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        student_layers: Option<usize>,
        /// Replace the strategy's fusion: dot, kqv or concat.
        #[arg(long)]
        fusion: Option<String>,
        /// Head count for `--fusion kqv`.
        #[arg(long, default_value_t = 1)]
        fusion_heads: usize,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Grid search over learning rate, eta, lambda and temperature.
    Grid {
        config: PathBuf,
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        /// Comma-separated strategy names.
        #[arg(long)]
        strategies: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Export attention weights, PCA coordinates or cosine distances for a
    /// distillation run.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Validation examples to use (default 10 for attention, 100 otherwise).
        #[arg(long)]
        examples: Option<usize>,
        /// Student layer for the attention dump (default: first participating).
        #[arg(long)]
        layer: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Attention,
    Pca,
    Cosine,
}

/// Error classes the command line distinguishes.
#[derive(Debug)]
pub enum CliError {
    Core(Error),
    BelowFloor { accuracy: f64, floor: f64 },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::BelowFloor { .. } => "accuracy-floor",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 2,
            "divergence" => 3,
            "io" | "format" => 4,
            _ => 5,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::BelowFloor { accuracy, floor } => {
                format!("best validation accuracy {accuracy} is below the floor {floor}")
            }
        }
    }

    /// Single-line JSON for stderr.
    pub fn line(&self) -> String {
        serde_json::json!({
            "error": self.category(),
            "exit_code": self.exit_code(),
            "message": self.message().replace('\n', " "),
        })
        .to_string()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Usage errors are printed by clap.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<Vec<String>> {
    match cmd {
        Command::TrainTeacher { config, output_root } => {
            let cfg = RunConfigFile::load(&config)?;
            match cfg.precision {
                Precision::F64 => cmd_train_teacher::<f64>(cfg, output_root),
                Precision::F32 => cmd_train_teacher::<f32>(cfg, output_root),
            }
        }
        Command::Distill {
            config,
            teacher_checkpoint,
            strategy,
            student_layers,
            fusion,
            fusion_heads,
            output_root,
        } => {
            let mut cfg = RunConfigFile::load(&config)?;
            if let Some(s) = strategy {
                let name = StrategyName::from_str(&s)?;
                cfg.alignment.strategy = name;
                match name {
                    StrategyName::Nkd => (cfg.train.eta, cfg.train.lambda) = (0.0, 0.0),
                    StrategyName::Rkd => cfg.train.lambda = 0.0,
                    _ => {}
                }
            }
            if let Some(m) = student_layers {
                cfg.student.num_layers = m;
            }
            if let Some(f) = fusion {
                cfg.alignment.fusion = Some(parse_fusion(&f, fusion_heads)?);
            }
            set_teacher(&mut cfg, teacher_checkpoint)?;
            cfg.validate()?;
            match cfg.precision {
                Precision::F64 => cmd_distill::<f64>(cfg, output_root),
                Precision::F32 => cmd_distill::<f32>(cfg, output_root),
            }
        }
        Command::Grid {
            config,
            teacher_checkpoint,
            strategies,
            workers,
            output_root,
        } => {
            let mut cfg = RunConfigFile::load(&config)?;
            if let Some(list) = strategies {
                cfg.grid.strategies = list
                    .split(',')
                    .map(|s| StrategyName::from_str(s.trim()))
                    .collect::<Result<_>>()?;
            }
            if let Some(w) = workers {
                cfg.grid.workers = w;
            }
            set_teacher(&mut cfg, teacher_checkpoint)?;
            cfg.validate()?;
            match cfg.precision {
                Precision::F64 => cmd_grid::<f64>(cfg, output_root),
                Precision::F32 => cmd_grid::<f32>(cfg, output_root),
            }
        }
        Command::Analyze {
            run_dir,
            mode,
            examples,
            layer,
        } => {
            let cfg = RunConfigFile::load(&run_dir.join(CONFIG_FILE))?;
            match cfg.precision {
                Precision::F64 => cmd_analyze::<f64>(&cfg, &run_dir, mode, examples, layer),
                Precision::F32 => cmd_analyze::<f32>(&cfg, &run_dir, mode, examples, layer),
            }
        }
    }
}

fn parse_fusion(name: &str, heads: usize) -> Result<FusionKind> {
    match name {
        "dot" => Ok(FusionKind::AlpDot),
        "kqv" => Ok(FusionKind::AlpKqv { num_heads: heads }),
        "concat" => Ok(FusionKind::CkdConcat),
        other => Err(Error::config(format!("unknown fusion {other:?}; valid: dot|kqv|concat"))),
    }
}

/// Stores the teacher path in the config as an absolute path, so the saved
/// config stays usable from any directory.
fn set_teacher(cfg: &mut RunConfigFile, flag: Option<PathBuf>) -> Result<()> {
    let path = flag
        .or_else(|| cfg.student.teacher_checkpoint.clone())
        .ok_or_else(|| Error::config("no teacher checkpoint: pass --teacher-checkpoint or set student.teacher_checkpoint"))?;
    let abs = std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
    cfg.student.teacher_checkpoint = Some(abs);
    Ok(())
}

fn load_teacher<T: Scalar>(cfg: &RunConfigFile) -> Result<Encoder<T>> {
    let path = cfg
        .student
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("config has no student.teacher_checkpoint"))?;
    load_checkpoint(path)
}

/// Creates `<root>/<command>-<utc time>-<config hash>`, adding a numeric
/// suffix when that name is taken.
pub fn create_run_dir(root: &Path, command: &str, cfg: &RunConfigFile) -> Result<PathBuf> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}-{}", cfg.hash()?);
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    write_file(path, text)
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Timing {
    wall_clock_secs: f64,
}

fn start_run(cfg: &RunConfigFile, command: &str, root: Option<PathBuf>) -> Result<PathBuf> {
    let root = root.unwrap_or_else(|| cfg.output_root());
    let dir = create_run_dir(&root, command, cfg)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    println!("run_dir {}", dir.display());
    Ok(dir)
}

fn check_floor(accuracy: f64, floor: f64) -> CliResult<()> {
    if accuracy < floor {
        return Err(CliError::BelowFloor { accuracy, floor });
    }
    Ok(())
}

fn task_for(cfg: &RunConfigFile) -> Result<TaskData> {
    build_task(&cfg.task)
}

fn cmd_train_teacher<T: Scalar>(cfg: RunConfigFile, root: Option<PathBuf>) -> CliResult<Vec<String>> {
    let task = task_for(&cfg)?;
    let dir = start_run(&cfg, "teacher", root)?;
    let (teacher, mut record) = train_teacher::<T>(&cfg.teacher, &cfg.teacher_config(), &task)?;
    save_checkpoint(&teacher, dir.join(TEACHER_CKPT))?;
    record.checkpoint = Some(TEACHER_CKPT.into());
    write_json(&dir.join(METRICS_FILE), &record)?;
    write_json(&dir.join(TIMING_FILE), &Timing { wall_clock_secs: record.wall_clock_secs })?;
    let lines = vec![
        format!("best_valid_accuracy {} (epoch {})", record.best_valid_accuracy, record.best_epoch),
    ];
    check_floor(record.best_valid_accuracy, cfg.teacher_train.accuracy_floor)?;
    Ok(lines)
}

fn cmd_distill<T: Scalar>(cfg: RunConfigFile, root: Option<PathBuf>) -> CliResult<Vec<String>> {
    let task = task_for(&cfg)?;
    let teacher = load_teacher::<T>(&cfg)?;
    let train = cfg.distill_config();
    let outputs = TeacherOutputs::build(&teacher, &task, train.eval_batch_size)?;
    let dir = start_run(&cfg, "distill", root)?;
    let mut run = distill_cached(&teacher, &outputs, &train, &task)?;
    save_checkpoint(&run.student, dir.join(STUDENT_CKPT))?;
    if let Some(f) = &run.fusion {
        write_json(&dir.join(FUSION_FILE), &f.to_file())?;
    }
    run.record.checkpoint = Some(STUDENT_CKPT.into());
    write_json(&dir.join(METRICS_FILE), &run.record)?;
    write_json(&dir.join(TIMING_FILE), &Timing { wall_clock_secs: run.record.wall_clock_secs })?;
    let r = &run.record;
    let lines = vec![
        format!("strategy {} best_valid_accuracy {} (epoch {})", train.strategy, r.best_valid_accuracy, r.best_epoch),
    ];
    check_floor(r.best_valid_accuracy, cfg.train.accuracy_floor)?;
    Ok(lines)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub strategy: StrategyName,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

/// Contents of a grid run's metrics file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridMetrics {
    pub rows: Vec<GridRow>,
    pub skipped: Vec<SkippedCell>,
    pub best: Vec<RunRecord>,
    pub seed_runs: Vec<SeedSummary>,
}

fn cmd_grid<T: Scalar>(cfg: RunConfigFile, root: Option<PathBuf>) -> CliResult<Vec<String>> {
    let task = task_for(&cfg)?;
    let teacher = load_teacher::<T>(&cfg)?;
    let base = cfg.distill_config();
    let outputs = TeacherOutputs::build(&teacher, &task, base.eval_batch_size)?;
    let workers = match cfg.grid.workers {
        0 => available_workers(),
        w => w,
    };
    let dir = start_run(&cfg, "grid", root)?;
    let start = std::time::Instant::now();
    let outcome = grid_search(&teacher, &outputs, &task, &base, &cfg.grid.strategies, &cfg.grid.grid(), workers)?;
    write_grid_csv(&dir.join("grid.csv"), &outcome.rows)?;
    let mut seed_runs = Vec::new();
    if !cfg.grid.seeds.is_empty() {
        for best in &outcome.best {
            let runs = seed_sweep(&teacher, &outputs, &task, &best.config, &cfg.grid.seeds, workers)?;
            let accuracies: Vec<f64> = runs.iter().map(|r| r.best_valid_accuracy).collect();
            seed_runs.push(SeedSummary {
                strategy: best.config.strategy,
                seeds: cfg.grid.seeds.clone(),
                mean: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
                accuracies,
            });
        }
    }
    let metrics = GridMetrics {
        rows: outcome.rows,
        skipped: outcome.skipped,
        best: outcome.best,
        seed_runs,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_json(&dir.join(TIMING_FILE), &Timing { wall_clock_secs: start.elapsed().as_secs_f64() })?;
    let mut lines = Vec::new();
    for b in &metrics.best {
        let c = &b.config;
        lines.push(format!(
            "best {} lr {} eta {} lambda {} T {} valid_accuracy {}",
            c.strategy, c.learning_rate, c.eta, c.lambda, c.temperature, b.best_valid_accuracy
        ));
    }
    for s in &metrics.seed_runs {
        lines.push(format!("seeds {} mean {}", s.strategy, s.mean));
    }
    Ok(lines)
}

#[derive(Serialize)]
struct PcaSummary<'a> {
    tags: Vec<String>,
    examples: usize,
    eigenvalues: &'a [f64],
    explained_variance: [f64; 2],
    degenerate: bool,
}

#[derive(Serialize)]
struct CosineSummary {
    pair: String,
    mean_distance: f64,
}

fn cmd_analyze<T: Scalar>(
    cfg: &RunConfigFile,
    dir: &Path,
    mode: Mode,
    examples: Option<usize>,
    layer: Option<usize>,
) -> CliResult<Vec<String>> {
    let record: RunRecord = read_json(&dir.join(METRICS_FILE))?;
    if mode == Mode::Attention && record.fusion == Some(FusionKind::CkdConcat) {
        return Err(Error::config("no attention weights for concatenation fusion").into());
    }
    let task = task_for(cfg)?;
    let teacher = load_teacher::<T>(cfg)?;
    let student: Encoder<T> = load_checkpoint(dir.join(STUDENT_CKPT))?;
    let count = examples.unwrap_or(if mode == Mode::Attention { 10 } else { 100 }).min(task.valid.len());
    let ids: Vec<usize> = (0..count).collect();
    let mut lines = Vec::new();
    match mode {
        Mode::Attention => {
            let (plan, kind) = match (&record.plan, record.fusion) {
                (Some(p), Some(k)) if k.has_weights() => (p, k),
                _ => {
                    return Err(Error::config(format!(
                        "no attention weights for strategy {}",
                        record.config.strategy
                    ))
                    .into())
                }
            };
            let file: FusionFile = read_json(&dir.join(FUSION_FILE))?;
            if file.kind != kind {
                return Err(Error::input("fusion file kind does not match the run record").into());
            }
            let fusion = Fusion::<T>::from_file(&file, plan, teacher.config().hidden_dim)?;
            let j = match layer {
                Some(j) => j,
                None => plan.participating().next().map(|(j, _)| j).expect("plan has participants"),
            };
            let dump = dump_attention(&student, &teacher, &fusion, plan, &task.valid, &ids, j)?;
            let path = dir.join(format!("attention_s{j}.csv"));
            dump.write_csv(&path)?;
            lines.push(format!("wrote {} ({} rows)", path.display(), dump.rows.len()));
        }
        Mode::Pca => {
            let s = cls_states(&student, &task.valid, &ids)?;
            let t = cls_states(&teacher, &task.valid, &ids)?;
            let mut tagged: Vec<(String, &crate::tensor::Tensor<T>)> = Vec::new();
            for (i, x) in s.iter().enumerate() {
                tagged.push((format!("s{}", i + 1), x));
            }
            for (i, x) in t.iter().enumerate() {
                tagged.push((format!("t{}", i + 1), x));
            }
            let refs: Vec<(&str, &crate::tensor::Tensor<T>)> = tagged.iter().map(|(n, x)| (n.as_str(), *x)).collect();
            let report = pca_project(&refs)?;
            let path = dir.join("pca.csv");
            report.write_csv(&path)?;
            write_json(
                &dir.join("pca.json"),
                &PcaSummary {
                    tags: tagged.iter().map(|(n, _)| n.clone()).collect(),
                    examples: count,
                    eigenvalues: &report.eigenvalues,
                    explained_variance: report.explained_variance,
                    degenerate: report.degenerate,
                },
            )?;
            lines.push(format!("wrote {}", path.display()));
            lines.push(format!(
                "explained_variance {} {}",
                report.explained_variance[0], report.explained_variance[1]
            ));
        }
        Mode::Cosine => {
            let s = cls_states(&student, &task.valid, &ids)?;
            let t = cls_states(&teacher, &task.valid, &ids)?;
            let pairs: Vec<(usize, usize)> = (1..=s.len()).flat_map(|j| (1..=t.len()).map(move |k| (j, k))).collect();
            let report = cosine_distance_report(&s, &t, &pairs, &ids)?;
            let path = dir.join("cosine.csv");
            report.write_csv(&path)?;
            let summary: Vec<CosineSummary> = pairs
                .iter()
                .map(|&(j, k)| {
                    let pair = pair_label(j, k);
                    CosineSummary {
                        mean_distance: report.mean(&pair).unwrap_or(f64::NAN),
                        pair,
                    }
                })
                .collect();
            write_json(&dir.join("cosine.json"), &summary)?;
            lines.push(format!("wrote {} ({} rows)", path.display(), report.rows.len()));
        }
    }
    Ok(lines)
}

/// Entry point for the binary.
pub fn main() -> ExitCode {
    run(std::env::args_os())
}
