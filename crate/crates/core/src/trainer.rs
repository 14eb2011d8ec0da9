//! Teacher training, student distillation and grid search.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{bucket_plan, full_span_plan, make_pkd_plan, validate, AlignmentPlan, Overlap};
use crate::data::{batches, epoch_seed, Batch, Dataset, TaskData};
use crate::encoder::{dropout_rng, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionKind};
use crate::losses::{alp_loss, ce_loss, kd_loss, pkd_loss, total_loss, LossBreakdown, LossWeights};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Optimizer, OptimizerKind, ParamStore, Tensor};

/// Distillation recipes by their command-line names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyName {
    Nkd,
    Rkd,
    Pkd,
    CkdNo,
    CkdPo,
    AlpNo,
    AlpPo,
    AlpFull,
}

impl StrategyName {
    pub const ALL: [StrategyName; 8] = [
        StrategyName::Nkd,
        StrategyName::Rkd,
        StrategyName::Pkd,
        StrategyName::CkdNo,
        StrategyName::CkdPo,
        StrategyName::AlpNo,
        StrategyName::AlpPo,
        StrategyName::AlpFull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Nkd => "nkd",
            StrategyName::Rkd => "rkd",
            StrategyName::Pkd => "pkd",
            StrategyName::CkdNo => "ckd-no",
            StrategyName::CkdPo => "ckd-po",
            StrategyName::AlpNo => "alp-no",
            StrategyName::AlpPo => "alp-po",
            StrategyName::AlpFull => "alp-full",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Self::as_str).join("|")
    }

    /// Whether the recipe has a hidden-state term.
    pub fn uses_hidden(self) -> bool {
        !matches!(self, StrategyName::Nkd | StrategyName::Rkd)
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy {s:?}; valid: {}", Self::valid_names())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Zero selects [`default_epochs`] for the training set size.
    pub epochs: usize,
    pub temperature: f64,
    pub eta: f64,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub strategy: StrategyName,
    /// Replaces the strategy's fusion kind (e.g. `ALP_KQV` for `alp-*`).
    pub fusion: Option<FusionKind>,
    pub student_layers: usize,
    /// PKD: teacher layer for each participating student layer, in order.
    pub pkd_layers: Option<Vec<usize>>,
    /// Give the last student layer a hidden-state target as well.
    pub include_last: bool,
    /// Multiply the soft-label loss by `T^2`.
    pub kd_t_squared: bool,
    pub eval_batch_size: usize,
    /// Run the teacher with dropout on each training batch instead of
    /// reusing its eval-mode outputs.
    pub teacher_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 0,
            temperature: 1.0,
            eta: 0.0,
            lambda: 0.0,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            strategy: StrategyName::Nkd,
            fusion: None,
            student_layers: 2,
            pkd_layers: None,
            include_last: false,
            kd_t_squared: false,
            eval_batch_size: 256,
            teacher_dropout: false,
        }
    }
}

/// Epochs by training-set size: 50 below 1k examples, 20 below 5k, 10 up
/// to 300k and 5 beyond.
pub fn default_epochs(train_size: usize) -> usize {
    match train_size {
        0..1_000 => 50,
        1_000..5_000 => 20,
        5_000..=300_000 => 10,
        _ => 5,
    }
}

impl TrainConfig {
    pub fn effective_epochs(&self, train_size: usize) -> usize {
        if self.epochs == 0 {
            default_epochs(train_size)
        } else {
            self.epochs
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.eta, self.lambda, self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} is not a finite nonnegative number", self.learning_rate)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        self.loss_weights()?;
        match self.strategy {
            StrategyName::Nkd if self.eta != 0.0 || self.lambda != 0.0 => {
                Err(Error::config("nkd trains on labels only; set eta = lambda = 0"))
            }
            StrategyName::Rkd if self.lambda != 0.0 => {
                Err(Error::config("rkd has no hidden-state term; set lambda = 0"))
            }
            _ => Ok(()),
        }
    }
}

/// Default PKD picks: participating student layer `j` takes teacher layer
/// `1 + (j - 1) * floor(n / p)` for `p` participating layers.
pub fn default_pkd_layers(n: usize, m: usize, include_last: bool) -> Vec<usize> {
    let p = if include_last { m } else { m - 1 };
    let stride = (n / p.max(1)).max(1);
    (0..p).map(|j| (1 + j * stride).min(n)).collect()
}

/// Alignment plan and fusion kind for a recipe; `None` for recipes without
/// a hidden-state term.
pub fn resolve_strategy(
    cfg: &TrainConfig,
    teacher_layers: usize,
) -> Result<Option<(AlignmentPlan, Option<FusionKind>)>> {
    let (n, m) = (teacher_layers, cfg.student_layers);
    if m == 0 || m > n {
        return Err(Error::config(format!("student depth {m} must be within 1..={n}")));
    }
    let fusion_for = |default: FusionKind| -> Result<FusionKind> {
        match (cfg.fusion, default) {
            (None, d) => Ok(d),
            (Some(FusionKind::CkdConcat), FusionKind::CkdConcat) => Ok(FusionKind::CkdConcat),
            (Some(f), FusionKind::AlpDot) if f != FusionKind::CkdConcat => Ok(f),
            (Some(f), _) => Err(Error::config(format!(
                "fusion {f:?} cannot be used with strategy {}",
                cfg.strategy
            ))),
        }
    };
    let plan = match cfg.strategy {
        StrategyName::Nkd | StrategyName::Rkd => {
            if let Some(f) = cfg.fusion {
                return Err(Error::config(format!("strategy {} takes no fusion, got {f:?}", cfg.strategy)));
            }
            return Ok(None);
        }
        StrategyName::Pkd => {
            if let Some(f) = cfg.fusion {
                return Err(Error::config(format!("invalid pairing: PKD_SKIP with fusion {f:?}")));
            }
            let layers = cfg
                .pkd_layers
                .clone()
                .unwrap_or_else(|| default_pkd_layers(n, m, cfg.include_last));
            let p = if cfg.include_last { m } else { m - 1 };
            if layers.len() > p {
                return Err(Error::config(format!(
                    "{} PKD layers for {p} participating student layers",
                    layers.len()
                )));
            }
            let mut picks: Vec<Option<usize>> = layers.into_iter().map(Some).collect();
            picks.resize(m, None);
            (make_pkd_plan(n, m, &picks)?, None)
        }
        StrategyName::CkdNo => (bucket_plan(n, m, Overlap::No, cfg.include_last)?, Some(fusion_for(FusionKind::CkdConcat)?)),
        StrategyName::CkdPo => (bucket_plan(n, m, Overlap::Po, cfg.include_last)?, Some(fusion_for(FusionKind::CkdConcat)?)),
        StrategyName::AlpNo => (bucket_plan(n, m, Overlap::No, cfg.include_last)?, Some(fusion_for(FusionKind::AlpDot)?)),
        StrategyName::AlpPo => (bucket_plan(n, m, Overlap::Po, cfg.include_last)?, Some(fusion_for(FusionKind::AlpDot)?)),
        StrategyName::AlpFull => (full_span_plan(n, m, cfg.include_last)?, Some(fusion_for(FusionKind::AlpDot)?)),
    };
    let report = validate(&plan.0);
    if !report.is_ok() {
        let msgs: Vec<_> = report.violations.iter().map(|v| v.message.clone()).collect();
        return Err(Error::config(format!("invalid alignment plan: {}", msgs.join("; "))));
    }
    if plan.0.num_participating() == 0 {
        return Err(Error::config("alignment plan has no participating student layers"));
    }
    Ok(Some(plan))
}

/// Teacher outputs for a whole dataset, computed once in eval mode.
#[derive(Clone, Debug)]
pub struct TeacherCache<T> {
    /// Per layer, `[examples, hidden]`.
    pub cls: Vec<Tensor<T>>,
    /// `[examples, classes]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn build(teacher: &Encoder<T>, dataset: &Dataset, eval_batch_size: usize) -> Result<Self> {
        let d = teacher.config().hidden_dim;
        let c = teacher.config().num_classes;
        let mut cls = vec![Vec::with_capacity(dataset.len() * d); teacher.num_layers()];
        let mut logits = Vec::with_capacity(dataset.len() * c);
        for batch in batches(dataset, eval_batch_size, None)? {
            let out = teacher.infer(&batch.tokens())?;
            for (acc, layer) in cls.iter_mut().zip(&out.cls) {
                acc.extend_from_slice(layer.data());
            }
            logits.extend_from_slice(out.logits.data());
        }
        Ok(Self {
            cls: cls
                .into_iter()
                .map(|v| Tensor::new(vec![dataset.len(), d], v))
                .collect::<Result<_>>()?,
            logits: Tensor::new(vec![dataset.len(), c], logits)?,
        })
    }

    fn rows(t: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
        let w = t.shape()[1];
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![indices.len(), w], data).expect("row gather")
    }

    pub fn logits_for(&self, indices: &[usize]) -> Tensor<T> {
        Self::rows(&self.logits, indices)
    }

    pub fn cls_for(&self, layer: usize, indices: &[usize]) -> Tensor<T> {
        Self::rows(&self.cls[layer], indices)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Teacher,
    Student,
}

/// Mean α over the validation set for one student layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAlpha {
    pub student_layer: usize,
    pub teacher_layers: Vec<usize>,
    pub mean_alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Step-weighted mean of the training breakdowns.
    pub train: LossBreakdown,
    pub valid_accuracy: f64,
    pub valid_ce: f64,
    pub alpha: Vec<LayerAlpha>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub epochs_run: usize,
    pub loss_weights: LossWeights,
    pub plan: Option<AlignmentPlan>,
    pub fusion: Option<FusionKind>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_valid_accuracy: f64,
    pub teacher_fingerprint_before: Option<String>,
    pub teacher_fingerprint_after: Option<String>,
    pub checkpoint: Option<String>,
    /// Kept out of serialized records so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn teacher_unchanged(&self) -> bool {
        self.teacher_fingerprint_before == self.teacher_fingerprint_after
    }
}

struct Teaching<'a, T> {
    teacher: &'a Encoder<T>,
    plan: Option<&'a AlignmentPlan>,
    train: &'a TeacherCache<T>,
    valid: &'a TeacherCache<T>,
}

struct Fitted<T> {
    model: Encoder<T>,
    fusion: Option<Fusion<T>>,
    epochs: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    best_epoch: usize,
    best_valid_accuracy: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Validation accuracy and mean cross-entropy of `model`.
pub fn evaluate<T: Scalar>(model: &Encoder<T>, dataset: &Dataset, eval_batch_size: usize) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut ce = 0.0;
    for batch in batches(dataset, eval_batch_size, None)? {
        let out = model.infer(&batch.tokens())?;
        let c = out.logits.shape()[1];
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = &out.logits.data()[r * c..(r + 1) * c];
            if argmax(row) == label {
                correct += 1;
            }
            let max = row.iter().map(|x| x.to_f64c()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.to_f64c() - max).exp()).sum::<f64>().ln();
            ce += lse - row[label].to_f64c();
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok((correct as f64 / n, ce / n))
}

fn mean_alpha<T: Scalar>(
    model: &Encoder<T>,
    fusion: &Fusion<T>,
    plan: &AlignmentPlan,
    cache: &TeacherCache<T>,
    dataset: &Dataset,
    eval_batch_size: usize,
) -> Result<Vec<LayerAlpha>> {
    let mut sums: Vec<Vec<f64>> = plan.participating().map(|(_, s)| vec![0.0; s.len()]).collect();
    for batch in batches(dataset, eval_batch_size, None)? {
        let weights = attention_weights(model, fusion, plan, cache, &batch)?;
        for (acc, (_, w)) in sums.iter_mut().zip(&weights) {
            let k = acc.len();
            for row in w.data().chunks(k) {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x.to_f64c();
                }
            }
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(plan
        .participating()
        .zip(sums)
        .map(|((j, set), s)| LayerAlpha {
            student_layer: j,
            teacher_layers: set.to_vec(),
            mean_alpha: s.into_iter().map(|x| x / n).collect(),
        })
        .collect())
}

/// Eval-mode α for every participating student layer on one batch.
pub fn attention_weights<T: Scalar>(
    model: &Encoder<T>,
    fusion: &Fusion<T>,
    plan: &AlignmentPlan,
    cache: &TeacherCache<T>,
    batch: &Batch,
) -> Result<Vec<(usize, Tensor<T>)>> {
    if !fusion.kind().has_weights() {
        return Err(Error::config("no attention weights for concatenation fusion"));
    }
    let out = model.infer(&batch.tokens())?;
    let mut g = Graph::new();
    let bound = fusion.params().bind_frozen(&mut g);
    let mut result = Vec::new();
    for (j, set) in plan.participating() {
        let s = g.constant(out.cls[j - 1].clone());
        let ts: Vec<_> = set
            .iter()
            .map(|&k| g.constant(cache.cls_for(k - 1, &batch.indices)))
            .collect();
        let fused = fusion.fuse(&mut g, &bound, j, s, &ts)?;
        result.push((j, fused.weights.expect("attention fusion has weights")));
    }
    Ok(result)
}

fn snapshot<T: Scalar>(model: &Encoder<T>, fusion: &Option<Fusion<T>>) -> (ParamStore<T>, Option<ParamStore<T>>) {
    (model.params().clone(), fusion.as_ref().map(|f| f.params().clone()))
}

fn fit<T: Scalar>(
    mut model: Encoder<T>,
    mut fusion: Option<Fusion<T>>,
    teaching: Option<Teaching<'_, T>>,
    cfg: &TrainConfig,
    weights: &LossWeights,
    task: &TaskData,
) -> Result<Fitted<T>> {
    let epochs = cfg.effective_epochs(task.train.len());
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut fopt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = dropout_rng(cfg.seed);
    let mut records = Vec::with_capacity(epochs);
    let mut steps = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut best_params = snapshot(&model, &fusion);
    let plan = teaching.as_ref().and_then(|t| t.plan);
    let mut teacher_rng = dropout_rng(cfg.seed ^ 0x7eac_4e12);

    for epoch in 1..=epochs {
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        for (step, batch) in batches(&task.train, cfg.batch_size, Some(epoch_seed(cfg.seed, epoch)))?.enumerate() {
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let fbound = fusion.as_ref().map(|f| f.params().bind(&mut g)).unwrap_or_default();
            let out = model.forward(&mut g, &bound, &batch.tokens(), Some(&mut rng))?;
            let ce = ce_loss(&mut g, out.logits, &batch.labels)?;
            let mut kd = None;
            let mut hidden = None;
            if let Some(t) = &teaching {
                let noisy = if cfg.teacher_dropout && (weights.eta > 0.0 || weights.lambda > 0.0) {
                    let mut tg = Graph::new();
                    let tb = t.teacher.params().bind(&mut tg);
                    let tout = t.teacher.forward(&mut tg, &tb, &batch.tokens(), Some(&mut teacher_rng))?;
                    let cls: Vec<Tensor<T>> = tout.cls.iter().map(|&v| tg.value(v).clone()).collect();
                    Some((tg.value(tout.logits).clone(), cls))
                } else {
                    None
                };
                if weights.eta > 0.0 {
                    let tl = match &noisy {
                        Some((l, _)) => l.clone(),
                        None => t.train.logits_for(&batch.indices),
                    };
                    kd = Some(kd_loss(&mut g, out.logits, &tl, weights.temperature, cfg.kd_t_squared)?);
                }
                if let (Some(plan), true) = (t.plan, weights.lambda > 0.0) {
                    let tcls: Vec<_> = (0..plan.teacher_layers)
                        .map(|k| match &noisy {
                            Some((_, cls)) => g.constant(cls[k].clone()),
                            None => g.constant(t.train.cls_for(k, &batch.indices)),
                        })
                        .collect();
                    hidden = Some(match &fusion {
                        None => pkd_loss(&mut g, &out.cls, plan, &tcls)?,
                        Some(f) => alp_loss(&mut g, &out.cls, plan, &tcls, f, &fbound)?,
                    });
                }
            }
            let (total, breakdown) = total_loss(&mut g, ce, kd, hidden.as_ref(), weights)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {} at epoch {epoch} step {step} (ce {}, kd {}, hidden {})",
                    breakdown.total, breakdown.l_ce, breakdown.l_kd, breakdown.l_hidden
                )));
            }
            g.backward(total)?;
            model.params_mut().zero_grad();
            model.params_mut().accumulate_grads(&g, &bound)?;
            if !model.params().grads_finite() {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch} step {step}")));
            }
            opt.step(model.params_mut());
            if let Some(f) = fusion.as_mut() {
                f.params_mut().zero_grad();
                f.params_mut().accumulate_grads(&g, &fbound)?;
                fopt.step(f.params_mut());
            }
            sum.l_ce += breakdown.l_ce;
            sum.l_kd += breakdown.l_kd;
            sum.l_hidden += breakdown.l_hidden;
            sum.total += breakdown.total;
            count += 1;
            steps.push(StepRecord {
                epoch,
                step,
                loss: breakdown,
            });
        }
        let n = count.max(1) as f64;
        let train = LossBreakdown::combine(sum.l_ce / n, sum.l_kd / n, sum.l_hidden / n, Vec::new(), weights);
        let (acc, vce) = evaluate(&model, &task.valid, cfg.eval_batch_size)?;
        let alpha = match (&fusion, plan, &teaching) {
            (Some(f), Some(p), Some(t)) if f.kind().has_weights() => {
                mean_alpha(&model, f, p, t.valid, &task.valid, cfg.eval_batch_size)?
            }
            _ => Vec::new(),
        };
        if acc > best.1 {
            best = (epoch, acc);
            best_params = snapshot(&model, &fusion);
        }
        records.push(EpochRecord {
            epoch,
            train,
            valid_accuracy: acc,
            valid_ce: vce,
            alpha,
        });
    }
    if epochs > 0 {
        *model.params_mut() = best_params.0;
        if let (Some(f), Some(p)) = (fusion.as_mut(), best_params.1) {
            *f.params_mut() = p;
        }
    }
    Ok(Fitted {
        model,
        fusion,
        epochs: records,
        steps,
        best_epoch: best.0,
        best_valid_accuracy: if epochs > 0 { best.1 } else { 0.0 },
    })
}

fn check_vocab(config: &EncoderConfig, task: &TaskData) -> Result<()> {
    if task.vocab_size > config.vocab_size {
        return Err(Error::config(format!(
            "task uses {} token ids but the encoder vocabulary holds {}",
            task.vocab_size, config.vocab_size
        )));
    }
    if task.train.num_classes != config.num_classes {
        return Err(Error::config(format!(
            "task has {} classes but the encoder predicts {}",
            task.train.num_classes, config.num_classes
        )));
    }
    let longest = task.train.max_len().max(task.valid.max_len());
    if longest > config.max_seq_len {
        return Err(Error::config(format!(
            "examples reach length {longest} but max_seq_len is {}",
            config.max_seq_len
        )));
    }
    Ok(())
}

/// Trains `init` on labels only. Used for teachers (and from-scratch
/// baselines); the returned encoder holds the best-epoch parameters.
pub fn train_model<T: Scalar>(init: Encoder<T>, cfg: &TrainConfig, task: &TaskData) -> Result<(Encoder<T>, RunRecord)> {
    let start = Instant::now();
    check_vocab(init.config(), task)?;
    let cfg = TrainConfig {
        strategy: StrategyName::Nkd,
        eta: 0.0,
        lambda: 0.0,
        fusion: None,
        ..cfg.clone()
    };
    cfg.validate()?;
    let weights = LossWeights::ce_only();
    let encoder = init.config().clone();
    let fitted = fit(init, None, None, &cfg, &weights, task)?;
    let record = RunRecord {
        kind: RunKind::Teacher,
        epochs_run: fitted.epochs.len(),
        config: cfg,
        encoder,
        loss_weights: weights,
        plan: None,
        fusion: None,
        epochs: fitted.epochs,
        steps: fitted.steps,
        best_epoch: fitted.best_epoch,
        best_valid_accuracy: fitted.best_valid_accuracy,
        teacher_fingerprint_before: None,
        teacher_fingerprint_after: None,
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((fitted.model, record))
}

/// Fresh encoder from `config` (seeded by `cfg.seed`) trained on labels.
pub fn train_teacher<T: Scalar>(config: &EncoderConfig, cfg: &TrainConfig, task: &TaskData) -> Result<(Encoder<T>, RunRecord)> {
    train_model(Encoder::new(config.clone(), cfg.seed)?, cfg, task)
}

/// Teacher outputs on both splits.
pub struct TeacherOutputs<T> {
    pub train: TeacherCache<T>,
    pub valid: TeacherCache<T>,
}

impl<T: Scalar> TeacherOutputs<T> {
    pub fn build(teacher: &Encoder<T>, task: &TaskData, eval_batch_size: usize) -> Result<Self> {
        check_vocab(teacher.config(), task)?;
        Ok(Self {
            train: TeacherCache::build(teacher, &task.train, eval_batch_size)?,
            valid: TeacherCache::build(teacher, &task.valid, eval_batch_size)?,
        })
    }
}

pub struct Distilled<T> {
    pub student: Encoder<T>,
    pub fusion: Option<Fusion<T>>,
    pub record: RunRecord,
}

/// Distills `teacher` into a student built from its first
/// `cfg.student_layers` layers.
pub fn distill<T: Scalar>(teacher: &Encoder<T>, cfg: &TrainConfig, task: &TaskData) -> Result<Distilled<T>> {
    let outputs = TeacherOutputs::build(teacher, task, cfg.eval_batch_size)?;
    distill_cached(teacher, &outputs, cfg, task)
}

/// [`distill`] with teacher outputs computed once by the caller.
pub fn distill_cached<T: Scalar>(
    teacher: &Encoder<T>,
    outputs: &TeacherOutputs<T>,
    cfg: &TrainConfig,
    task: &TaskData,
) -> Result<Distilled<T>> {
    let start = Instant::now();
    cfg.validate()?;
    let before = teacher.params().fingerprint();
    let resolved = resolve_strategy(cfg, teacher.num_layers())?;
    let student = teacher.init_student(cfg.student_layers)?;
    let (plan, fusion_kind) = match resolved {
        Some((plan, kind)) => (Some(plan), kind),
        None => (None, None),
    };
    let fusion = match (&plan, fusion_kind) {
        (Some(p), Some(kind)) => Some(Fusion::new(kind, p, teacher.config().hidden_dim, cfg.seed)?),
        _ => None,
    };
    let weights = cfg.loss_weights()?;
    let teaching = Teaching {
        teacher,
        plan: plan.as_ref(),
        train: &outputs.train,
        valid: &outputs.valid,
    };
    let fitted = fit(student, fusion, Some(teaching), cfg, &weights, task)?;
    let after = teacher.params().fingerprint();
    let record = RunRecord {
        kind: RunKind::Student,
        config: cfg.clone(),
        encoder: fitted.model.config().clone(),
        epochs_run: fitted.epochs.len(),
        loss_weights: weights,
        plan,
        fusion: fusion_kind,
        epochs: fitted.epochs,
        steps: fitted.steps,
        best_epoch: fitted.best_epoch,
        best_valid_accuracy: fitted.best_valid_accuracy,
        teacher_fingerprint_before: Some(before),
        teacher_fingerprint_after: Some(after),
        checkpoint: None,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(Distilled {
        student: fitted.model,
        fusion: fitted.fusion,
        record,
    })
}

/// Hyper-parameter sets searched per strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Grid {
    pub learning_rates: Vec<f64>,
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
    /// Alternative PKD layer choices; empty uses the default picks only.
    pub pkd_layers: Vec<Vec<usize>>,
}

impl Default for Grid {
    fn default() -> Self {
        Self::paper(1.0)
    }
}

impl Grid {
    /// The published grid with learning rates multiplied by `lr_scale`.
    pub fn paper(lr_scale: f64) -> Self {
        Self {
            learning_rates: [1e-5, 2e-5, 5e-5].iter().map(|lr| lr * lr_scale).collect(),
            etas: vec![0.2, 0.5, 0.7],
            lambdas: vec![0.2, 0.5, 0.7],
            temperatures: vec![1.0, 5.0, 10.0, 20.0],
            pkd_layers: Vec::new(),
        }
    }

    /// Valid cells for `strategy` around `base`, plus the skipped ones.
    pub fn cells(&self, strategy: StrategyName, base: &TrainConfig) -> (Vec<TrainConfig>, Vec<SkippedCell>) {
        let mut cells = Vec::new();
        let mut skipped = Vec::new();
        let pkd: Vec<Option<Vec<usize>>> = if strategy == StrategyName::Pkd && !self.pkd_layers.is_empty() {
            self.pkd_layers.iter().cloned().map(Some).collect()
        } else {
            vec![base.pkd_layers.clone()]
        };
        let (etas, lambdas, temps) = match strategy {
            StrategyName::Nkd => (vec![0.0], vec![0.0], vec![1.0]),
            StrategyName::Rkd => (self.etas.clone(), vec![0.0], self.temperatures.clone()),
            _ => (self.etas.clone(), self.lambdas.clone(), self.temperatures.clone()),
        };
        for &lr in &self.learning_rates {
            for &eta in &etas {
                for &lambda in &lambdas {
                    for &t in &temps {
                        for layers in &pkd {
                            let cell = TrainConfig {
                                learning_rate: lr,
                                eta,
                                lambda,
                                temperature: t,
                                strategy,
                                pkd_layers: layers.clone(),
                                ..base.clone()
                            };
                            match cell.loss_weights() {
                                Ok(_) => cells.push(cell),
                                Err(e) => skipped.push(SkippedCell {
                                    strategy,
                                    learning_rate: lr,
                                    eta,
                                    lambda,
                                    temperature: t,
                                    reason: e.to_string(),
                                }),
                            }
                        }
                    }
                }
            }
        }
        (cells, skipped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub strategy: StrategyName,
    pub learning_rate: f64,
    pub eta: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub reason: String,
}

/// One trained grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub strategy: StrategyName,
    pub learning_rate: f64,
    pub eta: f64,
    pub lambda: f64,
    pub beta: f64,
    pub temperature: f64,
    pub seed: u64,
    pub student_layers: usize,
    pub pkd_layers: String,
    pub fusion: String,
    pub epochs: usize,
    pub best_valid_accuracy: f64,
    pub best_epoch: usize,
}

impl GridRow {
    fn from_record(r: &RunRecord) -> Self {
        let c = &r.config;
        Self {
            strategy: c.strategy,
            learning_rate: c.learning_rate,
            eta: c.eta,
            lambda: c.lambda,
            beta: r.loss_weights.beta,
            temperature: c.temperature,
            seed: c.seed,
            student_layers: c.student_layers,
            pkd_layers: match (&r.plan, c.strategy) {
                (Some(p), StrategyName::Pkd) => p
                    .participating()
                    .map(|(_, s)| s[0].to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                _ => String::new(),
            },
            fusion: r.fusion.map(|f| format!("{f:?}")).unwrap_or_default(),
            epochs: r.epochs_run,
            best_valid_accuracy: r.best_valid_accuracy,
            best_epoch: r.best_epoch,
        }
    }
}

pub struct GridOutcome {
    /// Every trained cell, in cell order.
    pub rows: Vec<GridRow>,
    pub skipped: Vec<SkippedCell>,
    /// Best record per strategy, in the order strategies were given.
    pub best: Vec<RunRecord>,
}

/// Runs `jobs` on up to `workers` threads; results keep job order.
pub fn run_pool<J, R, F>(jobs: &[J], workers: usize, f: F) -> Vec<R>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn available_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Trains every valid cell of `grid` for each strategy and keeps the best
/// record per strategy (first cell wins ties). Step logs are dropped from
/// the returned records.
pub fn grid_search<T: Scalar>(
    teacher: &Encoder<T>,
    outputs: &TeacherOutputs<T>,
    task: &TaskData,
    base: &TrainConfig,
    strategies: &[StrategyName],
    grid: &Grid,
    workers: usize,
) -> Result<GridOutcome> {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    for &s in strategies {
        let (c, k) = grid.cells(s, base);
        cells.extend(c);
        skipped.extend(k);
    }
    if cells.is_empty() {
        return Err(Error::config("grid has no valid cells"));
    }
    for cell in &cells {
        cell.validate()?;
        resolve_strategy(cell, teacher.num_layers())?;
    }
    let results = run_pool(&cells, workers, |cell| {
        distill_cached(teacher, outputs, cell, task).map(|mut d| {
            d.record.steps.clear();
            d.record
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = records.iter().map(GridRow::from_record).collect();
    let mut best = Vec::new();
    for &s in strategies {
        let winner = records
            .iter()
            .filter(|r| r.config.strategy == s)
            .fold(None::<&RunRecord>, |acc, r| match acc {
                Some(a) if a.best_valid_accuracy >= r.best_valid_accuracy => Some(a),
                _ => Some(r),
            });
        if let Some(w) = winner {
            best.push(w.clone());
        }
    }
    Ok(GridOutcome { rows, skipped, best })
}

/// Reruns `cfg` under each seed.
pub fn seed_sweep<T: Scalar>(
    teacher: &Encoder<T>,
    outputs: &TeacherOutputs<T>,
    task: &TaskData,
    cfg: &TrainConfig,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<RunRecord>> {
    let cells: Vec<TrainConfig> = seeds.iter().map(|&seed| TrainConfig { seed, ..cfg.clone() }).collect();
    run_pool(&cells, workers, |c| {
        distill_cached(teacher, outputs, c, task).map(|mut d| {
            d.record.steps.clear();
            d.record
        })
    })
    .into_iter()
    .collect()
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
