//! Training objectives: hard-label cross-entropy, soft-label KD, the
//! normalized skip-matching loss, the fused hidden-state loss and their
//! weighted total.
//!
//! Batch reduction is always the mean; hidden-state terms are summed over
//! student layers.

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentPlan, Strategy};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Guard for normalizing a zero-norm hidden state.
pub const NORM_EPS: f64 = 1e-12;

/// One-hot targets for `labels`, rejecting out-of-range classes.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::input(format!(
                "label {l} at batch position {i} is outside 0..{classes}"
            )));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Row-wise `softmax(logits / temperature)` as a plain tensor.
pub fn soften<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("expected [batch, classes] logits, got {:?}", logits.shape())));
    }
    let v = logits.shape()[1];
    let inv = T::of(1.0 / temperature);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(v) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&x| ((x - max) * inv).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::input(format!(
            "{} labels for logits of shape {shape:?}",
            labels.len()
        )));
    }
    let targets = one_hot(labels, shape[1])?;
    g.soft_cross_entropy(logits, &targets)
}

/// Cross-entropy of the softened student against the softened teacher. The
/// teacher side is a constant. With `t_squared` the value is multiplied by
/// `T^2`.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    temperature: f64,
    t_squared: bool,
) -> Result<Var> {
    if g.shape(student_logits) != teacher_logits.shape() {
        return Err(Error::input(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.shape(student_logits),
            teacher_logits.shape()
        )));
    }
    if !(temperature >= 1.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be >= 1, got {temperature}")));
    }
    let targets = soften(teacher_logits, temperature)?;
    let scaled = g.scale(student_logits, T::of(1.0 / temperature));
    let loss = g.soft_cross_entropy(scaled, &targets)?;
    Ok(if t_squared {
        g.scale(loss, T::of(temperature * temperature))
    } else {
        loss
    })
}

fn check_states<T: Scalar>(g: &Graph<T>, plan: &AlignmentPlan, student: &[Var], teacher: &[Var]) -> Result<()> {
    if student.len() != plan.student_layers || teacher.len() != plan.teacher_layers {
        return Err(Error::config(format!(
            "plan is {}->{} layers but got {} teacher and {} student states",
            plan.teacher_layers,
            plan.student_layers,
            teacher.len(),
            student.len()
        )));
    }
    let shape = g.shape(student[0]);
    if shape.len() != 2 {
        return Err(Error::shape(format!("hidden states must be [batch, hidden], got {shape:?}")));
    }
    Ok(())
}

fn sum_terms<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Per-layer terms of a hidden-state loss alongside their sum.
pub struct HiddenLoss<T> {
    pub total: Var,
    /// `(j, term)` for every participating student layer.
    pub per_layer: Vec<(usize, Var)>,
    /// `(j, α)` for attention fusion; empty otherwise.
    pub weights: Vec<(usize, Tensor<T>)>,
}

/// Squared distance between L2-normalized student and mapped teacher CLS
/// states, summed over layers and averaged over the batch. Teacher states
/// are detached.
pub fn pkd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_cls: &[Var],
    plan: &AlignmentPlan,
    teacher_cls: &[Var],
) -> Result<HiddenLoss<T>> {
    if plan.strategy != Strategy::PkdSkip {
        return Err(Error::config(format!("skip-matching loss needs a PKD_SKIP plan, got {}", plan.strategy)));
    }
    check_states(g, plan, student_cls, teacher_cls)?;
    let batch = g.shape(student_cls[0])[0];
    let eps = T::of(NORM_EPS);
    let mut per_layer = Vec::new();
    for (j, set) in plan.participating() {
        let t = g.detach(teacher_cls[set[0] - 1]);
        let t = g.l2_normalize(t, eps)?;
        let s = g.l2_normalize(student_cls[j - 1], eps)?;
        let diff = g.sub(s, t)?;
        let sq = g.mul(diff, diff)?;
        let sum = g.sum(sq);
        per_layer.push((j, g.scale(sum, T::of(1.0 / batch as f64))));
    }
    if per_layer.is_empty() {
        return Err(Error::config("plan has no participating student layers"));
    }
    let terms: Vec<Var> = per_layer.iter().map(|&(_, v)| v).collect();
    Ok(HiddenLoss {
        total: sum_terms(g, &terms)?,
        per_layer,
        weights: Vec::new(),
    })
}

/// MSE between each student state and its fused teacher target, summed over
/// layers. Teacher states are detached; gradients reach the student states
/// and the fusion parameters in `bound`.
pub fn alp_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_cls: &[Var],
    plan: &AlignmentPlan,
    teacher_cls: &[Var],
    fusion: &Fusion<T>,
    bound: &[Var],
) -> Result<HiddenLoss<T>> {
    if plan.strategy == Strategy::PkdSkip {
        return Err(Error::config("fusion losses need a bucket or full-span plan, got PKD_SKIP"));
    }
    check_states(g, plan, student_cls, teacher_cls)?;
    let detached: Vec<Var> = teacher_cls.iter().map(|&t| g.detach(t)).collect();
    let mut per_layer = Vec::new();
    let mut weights = Vec::new();
    for (j, set) in plan.participating() {
        let states: Vec<Var> = set.iter().map(|&k| detached[k - 1]).collect();
        let fused = fusion.fuse(g, bound, j, student_cls[j - 1], &states)?;
        per_layer.push((j, g.mse(student_cls[j - 1], fused.fused)?));
        if let Some(w) = fused.weights {
            weights.push((j, w));
        }
    }
    if per_layer.is_empty() {
        return Err(Error::config("plan has no participating student layers"));
    }
    let terms: Vec<Var> = per_layer.iter().map(|&(_, v)| v).collect();
    Ok(HiddenLoss {
        total: sum_terms(g, &terms)?,
        per_layer,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub eta: f64,
    pub lambda: f64,
    pub temperature: f64,
}

/// `1 - eta - lambda` may land a few ulps below zero for valid grids.
const BETA_SLACK: f64 = 1e-12;

impl LossWeights {
    pub fn new(eta: f64, lambda: f64, temperature: f64) -> Result<Self> {
        if !(eta >= 0.0 && lambda >= 0.0) {
            return Err(Error::config(format!("eta={eta} and lambda={lambda} must be nonnegative")));
        }
        if !(temperature >= 1.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be >= 1, got {temperature}")));
        }
        let beta = 1.0 - eta - lambda;
        if beta < -BETA_SLACK {
            return Err(Error::config(format!(
                "beta = 1 - eta - lambda = {beta} is negative (eta={eta}, lambda={lambda})"
            )));
        }
        Ok(Self {
            beta: beta.max(0.0),
            eta,
            lambda,
            temperature,
        })
    }

    /// Pure cross-entropy.
    pub fn ce_only() -> Self {
        Self {
            beta: 1.0,
            eta: 0.0,
            lambda: 0.0,
            temperature: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_kd: f64,
    pub l_hidden: f64,
    pub total: f64,
    /// `(j, term)` for each student layer with a hidden-state loss.
    pub per_layer: Vec<(usize, f64)>,
}

impl LossBreakdown {
    pub fn combine(l_ce: f64, l_kd: f64, l_hidden: f64, per_layer: Vec<(usize, f64)>, w: &LossWeights) -> Self {
        Self {
            l_ce,
            l_kd,
            l_hidden,
            total: w.beta * l_ce + w.eta * l_kd + w.lambda * l_hidden,
            per_layer,
        }
    }
}

/// `beta*ce + eta*kd + lambda*hidden` on the graph. Missing terms count as
/// zero and are left out of the graph.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    ce: Var,
    kd: Option<Var>,
    hidden: Option<&HiddenLoss<T>>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if weights.beta < 0.0 {
        return Err(Error::config(format!("beta {} is negative", weights.beta)));
    }
    let item = |g: &Graph<T>, v: Var| g.value(v).item().to_f64c();
    let mut total = g.scale(ce, T::of(weights.beta));
    let l_kd = match kd {
        Some(kd) => {
            let t = g.scale(kd, T::of(weights.eta));
            total = g.add(total, t)?;
            item(g, kd)
        }
        None => 0.0,
    };
    let (l_hidden, per_layer) = match hidden {
        Some(h) => {
            let t = g.scale(h.total, T::of(weights.lambda));
            total = g.add(total, t)?;
            let per = h.per_layer.iter().map(|&(j, v)| (j, item(g, v))).collect();
            (item(g, h.total), per)
        }
        None => (0.0, Vec::new()),
    };
    let breakdown = LossBreakdown::combine(item(g, ce), l_kd, l_hidden, per_layer, weights);
    Ok((total, breakdown))
}
