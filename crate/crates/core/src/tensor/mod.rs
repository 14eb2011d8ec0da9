//! Dense row-major tensors and the reverse-mode autograd graph built on them.

mod graph;
pub mod gradcheck;
mod optim;
mod params;

pub use graph::{Graph, Var};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional value stored row-major.
///
/// An empty shape denotes a scalar holding exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let data = vec![T::zero(); numel(&shape)];
        Self { shape, data }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor from `f64` values, converting to the target scalar.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// 2-D tensor from nested rows; every row must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&x| T::of(x)).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64c()).collect()
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64c())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(numel(&shape));
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(format!(
                    "stack of mismatched shapes {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    /// Moves axis 0 of a rank-3 tensor to axis 1: `[a, b, c] -> [b, a, c]`.
    pub fn swap_leading(&self) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "swap_leading expects rank 3, got {:?}",
                self.shape
            )));
        }
        let (a, b, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut data = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                let src = &self.data[(i * b + j) * c..(i * b + j + 1) * c];
                data[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
            }
        }
        Ok(Self {
            shape: vec![b, a, c],
            data,
        })
    }
}
