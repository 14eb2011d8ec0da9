//! Run configuration files: strict TOML with every default written back out,
//! so the saved copy in a run directory reproduces the run.
//!
//! ```toml
//! precision = "f64"
//!
//! [task]
//! kind = "PARITY"
//! train_size = 4000
//!
//! [teacher]
//! num_layers = 4
//!
//! [teacher_train]
//! epochs = 30
//!
//! [student]
//! num_layers = 2
//! teacher_checkpoint = "runs/teacher-.../teacher.ckpt"
//!
//! [train]
//! learning_rate = 1e-3
//! eta = 0.2
//! lambda = 0.5
//!
//! [alignment]
//! strategy = "alp-full"
//!
//! [grid]
//! learning_rates = [2e-4, 4e-4, 1e-3]
//!
//! [output]
//! root = "runs"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::tensor::OptimizerKind;
use crate::trainer::{Grid, StrategyName, TrainConfig};

/// Scalar type the numeric core runs in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Optimization settings shared by teacher training and distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Zero picks the epoch count from the training set size.
    pub epochs: usize,
    pub temperature: f64,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub kd_t_squared: bool,
    pub eval_batch_size: usize,
    /// Distillation only: dropout in the teacher's forward passes.
    pub teacher_dropout: bool,
    /// The command fails when the best validation accuracy is lower.
    pub accuracy_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            temperature: d.temperature,
            eta: d.eta,
            lambda: d.lambda,
            seed: d.seed,
            optimizer: d.optimizer,
            kd_t_squared: d.kd_t_squared,
            eval_batch_size: d.eval_batch_size,
            teacher_dropout: d.teacher_dropout,
            accuracy_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub num_layers: usize,
    pub teacher_checkpoint: Option<PathBuf>,
}

impl Default for StudentSection {
    fn default() -> Self {
        Self {
            num_layers: 2,
            teacher_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSection {
    pub strategy: StrategyName,
    /// Replaces the strategy's fusion, e.g. `{ kind = "ALP_KQV", num_heads = 2 }`.
    pub fusion: Option<FusionKind>,
    pub pkd_layers: Option<Vec<usize>>,
    pub include_last: bool,
}

impl Default for AlignmentSection {
    fn default() -> Self {
        Self {
            strategy: StrategyName::AlpFull,
            fusion: None,
            pkd_layers: None,
            include_last: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub learning_rates: Vec<f64>,
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
    /// PKD teacher-layer choices; each entry is one candidate pick list.
    pub pkd_layers: Vec<Vec<usize>>,
    pub strategies: Vec<StrategyName>,
    /// Seeds for rerunning each strategy's best cell; empty skips reruns.
    pub seeds: Vec<u64>,
    /// Zero uses the available parallelism.
    pub workers: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = Grid::default();
        Self {
            learning_rates: g.learning_rates,
            etas: g.etas,
            lambdas: g.lambdas,
            temperatures: g.temperatures,
            pkd_layers: g.pkd_layers,
            strategies: vec![StrategyName::Nkd, StrategyName::Rkd, StrategyName::Pkd, StrategyName::AlpFull],
            seeds: Vec::new(),
            workers: 0,
        }
    }
}

impl GridSection {
    pub fn grid(&self) -> Grid {
        Grid {
            learning_rates: self.learning_rates.clone(),
            etas: self.etas.clone(),
            lambdas: self.lambdas.clone(),
            temperatures: self.temperatures.clone(),
            pkd_layers: self.pkd_layers.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Parent of run directories. Unset falls back to `ALPKD_OUTPUT_ROOT`,
    /// then `runs`.
    pub root: Option<PathBuf>,
}

pub const OUTPUT_ROOT_ENV: &str = "ALPKD_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub precision: Precision,
    pub task: TaskSpec,
    pub teacher: EncoderConfig,
    pub teacher_train: TrainSection,
    pub student: StudentSection,
    pub train: TrainSection,
    pub alignment: AlignmentSection,
    pub grid: GridSection,
    pub output: OutputSection,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Effective config with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// First 12 hex digits of the SHA-256 of [`Self::to_toml`].
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher.validate()?;
        if self.teacher.vocab_size < self.task.vocab_size {
            return Err(Error::config(format!(
                "teacher vocab_size {} is smaller than the task's {}",
                self.teacher.vocab_size, self.task.vocab_size
            )));
        }
        if self.teacher.num_classes != self.task.num_classes {
            return Err(Error::config(format!(
                "teacher has {} classes, task has {}",
                self.teacher.num_classes, self.task.num_classes
            )));
        }
        if self.teacher.max_seq_len < self.task.seq_len {
            return Err(Error::config(format!(
                "teacher max_seq_len {} is shorter than task seq_len {}",
                self.teacher.max_seq_len, self.task.seq_len
            )));
        }
        for floor in [self.teacher_train.accuracy_floor, self.train.accuracy_floor] {
            if !(0.0..=1.0).contains(&floor) {
                return Err(Error::config(format!("accuracy_floor {floor} is outside [0, 1]")));
            }
        }
        if self.grid.learning_rates.is_empty() || self.grid.etas.is_empty() || self.grid.lambdas.is_empty() || self.grid.temperatures.is_empty() {
            return Err(Error::config("grid value lists must be nonempty"));
        }
        self.teacher_config().validate()?;
        self.distill_config().validate()
    }

    /// Settings for `train-teacher`.
    pub fn teacher_config(&self) -> TrainConfig {
        let mut cfg = self.train_config(&self.teacher_train);
        cfg.strategy = StrategyName::Nkd;
        cfg.eta = 0.0;
        cfg.lambda = 0.0;
        cfg.student_layers = self.teacher.num_layers;
        cfg
    }

    /// Settings for `distill` and the base cell of `grid`.
    pub fn distill_config(&self) -> TrainConfig {
        self.train_config(&self.train)
    }

    fn train_config(&self, t: &TrainSection) -> TrainConfig {
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            temperature: t.temperature,
            eta: t.eta,
            lambda: t.lambda,
            seed: t.seed,
            optimizer: t.optimizer,
            strategy: self.alignment.strategy,
            fusion: self.alignment.fusion,
            student_layers: self.student.num_layers,
            pkd_layers: self.alignment.pkd_layers.clone(),
            include_last: self.alignment.include_last,
            kd_t_squared: t.kd_t_squared,
            eval_batch_size: t.eval_batch_size,
            teacher_dropout: t.teacher_dropout,
        }
    }

    /// Parent directory for new runs.
    pub fn output_root(&self) -> PathBuf {
        self.output
            .root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
