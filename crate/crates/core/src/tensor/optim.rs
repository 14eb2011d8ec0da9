use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Plain gradient descent: `w -= lr * g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(Sgd),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    /// Applies one update to every parameter of `store` from its current
    /// gradient buffer. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        match self {
            Optimizer::Sgd(sgd) => {
                let lr = T::of(sgd.lr);
                for id in store.ids().collect::<Vec<_>>() {
                    let (w, g) = store.value_and_grad_mut(id);
                    for (w, &g) in w.iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
            }
            Optimizer::Adam(adam) => {
                if adam.first.len() != store.len() {
                    adam.first = store.ids().map(|id| vec![T::zero(); store.value(id).len()]).collect();
                    adam.second = adam.first.clone();
                }
                adam.step += 1;
                let t = adam.step as i32;
                let (b1, b2) = (T::of(adam.beta1), T::of(adam.beta2));
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let lr = T::of(adam.lr);
                let eps = T::of(adam.eps);
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let (w, g) = store.value_and_grad_mut(id);
                    let (m, v) = (&mut adam.first[i], &mut adam.second[i]);
                    for j in 0..w.len() {
                        m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                        v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        w[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
