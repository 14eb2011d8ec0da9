//! Combining a set of teacher CLS states into one target vector per student
//! layer.
//!
//! * [`alp_fuse`]: softmax over raw dot products between the student state
//!   and each teacher state, then the weighted sum of teacher states.
//! * [`kqv_fuse`]: the student state as query against projected teacher
//!   keys and values, scaled per head by `1/sqrt(d_head)`.
//! * [`ckd_fuse`]: concatenation in ascending layer order followed by a
//!   linear projection back to the hidden width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentPlan;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum FusionKind {
    AlpDot,
    AlpKqv { num_heads: usize },
    CkdConcat,
}

impl FusionKind {
    /// Attention kinds produce α weights; concatenation does not.
    pub fn has_weights(self) -> bool {
        !matches!(self, FusionKind::CkdConcat)
    }
}

pub struct FusionResult<T> {
    /// `C^j`, `[batch, hidden]`.
    pub fused: Var,
    /// α, `[batch, |A(j)|]`; averaged over heads for multi-head attention.
    pub weights: Option<Tensor<T>>,
}

fn stack_states<T: Scalar>(g: &mut Graph<T>, states: &[Var]) -> Result<(Var, usize, usize)> {
    let first = *states
        .first()
        .ok_or_else(|| Error::config("fusion over an empty teacher set"))?;
    let shape = g.shape(first).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "teacher states must be [batch, hidden], got {shape:?}"
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    let mut rows = Vec::with_capacity(states.len());
    for &s in states {
        if g.shape(s) != [b, d] {
            return Err(Error::shape(format!(
                "teacher state {:?} differs from {:?}",
                g.shape(s),
                shape
            )));
        }
        rows.push(g.reshape(s, &[b, 1, d])?);
    }
    // [batch, k, hidden]
    let stacked = g.concat(&rows, 1)?;
    Ok((stacked, b, d))
}

fn check_student<T: Scalar>(g: &Graph<T>, student: Var, b: usize, d: usize) -> Result<()> {
    if g.shape(student) != [b, d] {
        return Err(Error::shape(format!(
            "student state {:?} does not match teacher states [{b}, {d}]",
            g.shape(student)
        )));
    }
    Ok(())
}

/// Dot-product attention over teacher states.
pub fn alp_fuse<T: Scalar>(g: &mut Graph<T>, student: Var, teachers: &[Var]) -> Result<FusionResult<T>> {
    let (stacked, b, d) = stack_states(g, teachers)?;
    check_student(g, student, b, d)?;
    let k = teachers.len();
    let query = g.reshape(student, &[b, d, 1])?;
    let scores = g.bmm(stacked, query, false, false)?;
    let scores = g.reshape(scores, &[b, k])?;
    let alpha = g.softmax(scores, 1)?;
    let weights = g.value(alpha).clone();
    let alpha = g.reshape(alpha, &[b, 1, k])?;
    let fused = g.bmm(alpha, stacked, false, false)?;
    let fused = g.reshape(fused, &[b, d])?;
    Ok(FusionResult {
        fused,
        weights: Some(weights),
    })
}

/// Multi-head key-query-value attention with the student state as query.
pub fn kqv_fuse<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teachers: &[Var],
    query_w: Var,
    key_w: Var,
    value_w: Var,
    num_heads: usize,
) -> Result<FusionResult<T>> {
    let (stacked, b, d) = stack_states(g, teachers)?;
    check_student(g, student, b, d)?;
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::config(format!(
            "hidden width {d} is not divisible by {num_heads} heads"
        )));
    }
    let k = teachers.len();
    let hd = d / num_heads;
    let flat = g.reshape(stacked, &[b * k, d])?;
    let q = g.matmul(student, query_w)?;
    let keys = g.matmul(flat, key_w)?;
    let values = g.matmul(flat, value_w)?;

    let q = g.reshape(q, &[b * num_heads, 1, hd])?;
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[b, k, num_heads, hd])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * num_heads, k, hd])
    };
    let keys = split(g, keys)?;
    let values = split(g, values)?;
    let scores = g.bmm(q, keys, false, true)?;
    let scores = g.scale(scores, T::of(1.0 / (hd as f64).sqrt()));
    let probs = g.softmax(scores, 2)?;
    let ctx = g.bmm(probs, values, false, false)?;
    let fused = g.reshape(ctx, &[b, d])?;

    let p = g.value(probs).data();
    let inv = T::of(1.0 / num_heads as f64);
    let mut weights = vec![T::zero(); b * k];
    for bi in 0..b {
        for h in 0..num_heads {
            for kk in 0..k {
                weights[bi * k + kk] += p[(bi * num_heads + h) * k + kk] * inv;
            }
        }
    }
    Ok(FusionResult {
        fused,
        weights: Some(Tensor::new(vec![b, k], weights)?),
    })
}

/// Concatenation of teacher states followed by `[k * hidden, hidden]`
/// projection.
pub fn ckd_fuse<T: Scalar>(g: &mut Graph<T>, teachers: &[Var], projection: Var) -> Result<FusionResult<T>> {
    let first = *teachers
        .first()
        .ok_or_else(|| Error::config("fusion over an empty teacher set"))?;
    let d = *g.shape(first).last().unwrap_or(&0);
    let want = teachers.len() * d;
    let ps = g.shape(projection).to_vec();
    if ps.len() != 2 || ps[0] != want {
        return Err(Error::config(format!(
            "projection {ps:?} does not take {} concatenated states of width {d} ({want} inputs)",
            teachers.len()
        )));
    }
    let cat = g.concat(teachers, 1)?;
    let fused = g.matmul(cat, projection)?;
    Ok(FusionResult {
        fused,
        weights: None,
    })
}

/// Trainable fusion parameters for every participating student layer of one
/// plan.
#[derive(Clone, Debug)]
pub struct Fusion<T> {
    kind: FusionKind,
    params: ParamStore<T>,
    /// For student layer `j`, the index of its first parameter in `params`.
    layer_base: Vec<Option<usize>>,
}

impl<T: Scalar> Fusion<T> {
    /// Allocates parameters for `plan` under `kind`. Weights are uniform in
    /// `±1/sqrt(fan_in)`.
    pub fn new(kind: FusionKind, plan: &AlignmentPlan, hidden_dim: usize, seed: u64) -> Result<Self> {
        if let FusionKind::AlpKqv { num_heads } = kind {
            if num_heads == 0 || !hidden_dim.is_multiple_of(num_heads) {
                return Err(Error::config(format!(
                    "hidden_dim {hidden_dim} is not divisible by {num_heads} fusion heads"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf05e);
        let mut params = ParamStore::new();
        let mut layer_base = vec![None; plan.student_layers];
        let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Result<Tensor<T>> {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(vec![rows, cols], data)
        };
        for (j, set) in plan.participating() {
            match kind {
                FusionKind::AlpDot => {}
                FusionKind::AlpKqv { .. } => {
                    layer_base[j - 1] = Some(params.len());
                    for role in ["query", "key", "value"] {
                        let w = uniform(hidden_dim, hidden_dim, &mut rng)?;
                        params.add(format!("fusion.{j}.{role}"), w);
                    }
                }
                FusionKind::CkdConcat => {
                    layer_base[j - 1] = Some(params.len());
                    let w = uniform(set.len() * hidden_dim, hidden_dim, &mut rng)?;
                    params.add(format!("fusion.{j}.projection"), w);
                }
            }
        }
        Ok(Self {
            kind,
            params,
            layer_base,
        })
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Fuses `teachers` (the states of `A(j)`, ascending) for student layer
    /// `j`, using parameters bound on `g` via [`ParamStore::bind`].
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        j: usize,
        student: Var,
        teachers: &[Var],
    ) -> Result<FusionResult<T>> {
        if teachers.is_empty() {
            return Err(Error::config(format!(
                "student layer {j} has no teacher layers to fuse"
            )));
        }
        let base = || {
            self.layer_base
                .get(j - 1)
                .copied()
                .flatten()
                .ok_or_else(|| Error::config(format!("no fusion parameters for student layer {j}")))
        };
        match self.kind {
            FusionKind::AlpDot => alp_fuse(g, student, teachers),
            FusionKind::AlpKqv { num_heads } => {
                let i = base()?;
                kqv_fuse(g, student, teachers, bound[i], bound[i + 1], bound[i + 2], num_heads)
            }
            FusionKind::CkdConcat => {
                let i = base()?;
                ckd_fuse(g, teachers, bound[i])
            }
        }
    }
}

/// One parameter of a saved fusion module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON form of a trained fusion module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFile {
    pub kind: FusionKind,
    pub params: Vec<SavedParam>,
}

impl<T: Scalar> Fusion<T> {
    pub fn to_file(&self) -> FusionFile {
        let params = self
            .params
            .ids()
            .map(|id| {
                let v = self.params.value(id);
                SavedParam {
                    name: self.params.name(id).to_string(),
                    shape: v.shape().to_vec(),
                    data: v.data().iter().map(|x| x.to_f64c()).collect(),
                }
            })
            .collect();
        FusionFile { kind: self.kind, params }
    }

    /// Rebuilds the module for `plan` and fills in the saved values, which
    /// must match the expected names and shapes one for one.
    pub fn from_file(file: &FusionFile, plan: &AlignmentPlan, hidden_dim: usize) -> Result<Self> {
        let mut fusion = Self::new(file.kind, plan, hidden_dim, 0)?;
        if file.params.len() != fusion.params.len() {
            return Err(Error::input(format!(
                "saved fusion has {} parameters, plan needs {}",
                file.params.len(),
                fusion.params.len()
            )));
        }
        for saved in &file.params {
            let id = fusion
                .params
                .find(&saved.name)
                .ok_or_else(|| Error::input(format!("unexpected fusion parameter {}", saved.name)))?;
            let slot = fusion.params.value_mut(id);
            if slot.shape() != saved.shape.as_slice() {
                return Err(Error::input(format!(
                    "fusion parameter {} has shape {:?}, expected {:?}",
                    saved.name,
                    saved.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(saved.shape.clone(), saved.data.iter().map(|&x| T::of(x)).collect())?;
        }
        Ok(fusion)
    }
}
