use sha2::{Digest, Sha256};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
}

/// Named trainable tensors in a fixed declaration order, each with an
/// additive gradient buffer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let grad = vec![T::zero(); value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a gradient-collecting leaf of `g`;
    /// the returned vars follow declaration order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Registers every parameter as a constant of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect()
    }

    /// Adds the gradients held by `vars` (as returned from [`bind`]) into
    /// the store's buffers. Vars without a gradient contribute nothing.
    ///
    /// [`bind`]: ParamStore::bind
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(grad) = g.grad(v) {
                for (acc, &d) in p.grad.iter_mut().zip(grad) {
                    *acc += d;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], &[T]) {
        let p = &mut self.params[id.0];
        (p.value.data_mut(), &p.grad)
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Hex SHA-256 over names, shapes and the little-endian `f64` image of
    /// every value, in declaration order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_f64c().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// True when every name, shape and value matches bit for bit.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_f64c().to_bits() == y.to_f64c().to_bits())
            })
    }
}
