use rand::Rng;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax {
        x: Var,
        inner: usize,
        axis_len: usize,
    },
    LogSoftmax {
        x: Var,
        inner: usize,
        axis_len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Input and the derivative at each element.
    Gelu(Var, Vec<T>),
    Relu(Var),
    Tanh(Var),
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Gelu(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Dropout(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Select { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamic computation graph, rebuilt for every forward pass.
///
/// Nodes are appended in creation order, which is a topological order by
/// construction. [`Graph::backward`] walks that order in reverse and visits
/// each node once. Leaf gradients accumulate across calls until
/// [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{:?}", s)
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation of GELU: value and derivative
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let x3 = x * x * x;
    // tanh via one exp, several times cheaper than libm tanh
    let t = T::one() - T::of(2.0) / ((T::of(2.0) * c * (x + k * x3)).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant leaf, cutting
    /// gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!(
                "{what}: shapes {} and {} differ",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a[..., n] + bias[n]`, the only broadcast the graph supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape(format!(
                "add_bias: bias {} does not match trailing axis of {}",
                shape_str(sb),
                shape_str(sa)
            )));
        }
        let n = sb[0];
        let b = self.value(bias).data().to_vec();
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |e| e * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Matrix product of `[r, k]` by `[k, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects rank-2 operands, got {} and {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch: 1,
                m,
                k,
                n,
            },
        ))
    }

    /// Batched product of `[B, r, k]` by `[B, k, c]`, with optional
    /// transposition of the trailing two axes of either operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!(
                "bmm expects rank-3 operands with equal batch, got {} and {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::shape(format!(
                "bmm inner dimensions disagree: {} x {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &da[i * m * k..(i + 1) * m * k],
                    ta,
                    &db[i * k * n..(i + 1) * k * n],
                    tb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "invalid permutation {:?} for shape {}",
                perm,
                shape_str(&shape)
            )));
        }
        let out = permute_data(self.value(x), perm);
        Ok(self.push(out, Op::Permute(x, perm.to_vec())))
    }

    fn axis_of(&self, x: Var, axis: usize, what: &str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "{what}: axis {axis} out of range for {}",
                shape_str(shape)
            )));
        }
        Ok(split_axis(shape, axis))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, d, inner) = self.axis_of(x, axis, "softmax")?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        if inner == 1 {
            for row in out.chunks_mut(d) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - max).exp();
                    sum += *e;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|e| *e *= inv);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * d + a) * inner + i;
                    let max = (0..d).map(|a| out[idx(a)]).fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for a in 0..d {
                        let e = (out[idx(a)] - max).exp();
                        out[idx(a)] = e;
                        sum += e;
                    }
                    for a in 0..d {
                        out[idx(a)] /= sum;
                    }
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                inner,
                axis_len: d,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, d, inner) = self.axis_of(x, axis, "log_softmax")?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * d + a) * inner + i;
                let max = (0..d).map(|a| out[idx(a)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..d).map(|a| (out[idx(a)] - max).exp()).sum::<T>().ln();
                for a in 0..d {
                    out[idx(a)] -= lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LogSoftmax {
                x,
                inner,
                axis_len: d,
            },
        ))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(format!(
                    "layer_norm: {name} {} does not match trailing axis of {}",
                    shape_str(self.shape(p)),
                    shape_str(&shape)
                )));
            }
        }
        let rows = numel(&shape) / d.max(1);
        let dn = T::of(d as f64);
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gv[c] * h + bv[c];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (vals, slopes): (Vec<T>, Vec<T>) = v.data().iter().map(|&e| gelu_parts(e)).unzip();
        let out = Tensor::new(v.shape().to_vec(), vals).expect("same shape");
        self.push(out, Op::Gelu(x, slopes))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |e| e.max(T::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, |e| e.tanh());
        self.push(out, Op::Tanh(x))
    }

    /// Inverted dropout; the identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        // 16-bit uniform draws, four per u64
        let cut = (rate * 65536.0).round().min(65536.0) as u32;
        let n = self.value(x).len();
        let mut mask = Vec::with_capacity(n);
        while mask.len() < n {
            let mut bits = rng.next_u64();
            for _ in 0..4.min(n - mask.len()) {
                let u = (bits & 0xffff) as u32;
                bits >>= 16;
                mask.push(if u < cut { T::zero() } else { keep });
            }
        }
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout(x, mask))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for {}",
                shape_str(&first)
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: {} incompatible with {} along axis {axis}",
                    shape_str(s),
                    shape_str(&first)
                )));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Picks `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let (outer, d, inner) = self.axis_of(x, axis, "select")?;
        if index >= d {
            return Err(Error::shape(format!(
                "select: index {index} out of range for axis of length {d}"
            )));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * d + index) * inner;
            data.extend_from_slice(&v[start..start + inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Select { x, axis, index }))
    }

    /// Gathers rows of a `[V, D]` table, producing `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!(
                "embedding table must be rank 2, got {}",
                shape_str(&shape)
            )));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::of(va.len() as f64);
        let s = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    /// Mean over rows of `-sum_w targets[w] * log softmax(logits)[w]` for
    /// `[B, V]` logits; targets are constants.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.shape() != shape.as_slice() {
            return Err(Error::shape(format!(
                "soft_cross_entropy: logits {} vs targets {}",
                shape_str(&shape),
                shape_str(targets.shape())
            )));
        }
        let (b, v) = (shape[0], shape[1]);
        let x = self.value(logits).data();
        let t = targets.data();
        let mut probs = vec![T::zero(); b * v];
        let mut total = T::zero();
        for r in 0..b {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&e| (e - max).exp()).sum::<T>().ln();
            for c in 0..v {
                let logp = row[c] - lse;
                probs[r * v + c] = logp.exp();
                total -= t[r * v + c] * logp;
            }
        }
        let loss = total / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: t.to_vec(),
                probs,
            },
        ))
    }

    /// Scales each trailing-axis row to unit L2 norm, dividing by
    /// `max(norm, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("l2_normalize on a scalar"))?;
        let v = self.value(x).data();
        let rows = v.len() / d.max(1);
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let n = row.iter().map(|&e| e * e).sum::<T>().sqrt().max(eps);
            norms[r] = n;
            for c in 0..d {
                out[r * d + c] = row[c] / n;
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms, eps }))
    }

    /// Reverse-mode pass from a one-element `loss`.
    ///
    /// Intermediate gradients are recomputed from scratch on each call;
    /// leaf gradients accumulate with `+=`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(self.shape(loss))
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0].grad, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, delta) in contributions {
                accumulate(&mut self.nodes[parent.0].grad, delta);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &mut dyn FnMut() -> Vec<T>| {
            if self.wants(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &mut || g.to_vec());
                emit(*b, &mut || g.iter().map(|&e| -e).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                emit(*a, &mut || g.iter().zip(vb).map(|(&e, &y)| e * y).collect());
                emit(*b, &mut || g.iter().zip(va).map(|(&e, &x)| e * x).collect());
            }
            Op::AddBias(a, b) => {
                emit(*a, &mut || g.to_vec());
                let n = self.value(*b).len();
                emit(*b, &mut || {
                    let mut db = vec![T::zero(); n];
                    for (idx, &e) in g.iter().enumerate() {
                        db[idx % n] += e;
                    }
                    db
                });
            }
            Op::Scale(x, c) => emit(*x, &mut || g.iter().map(|&e| e * *c).collect()),
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                emit(a, &mut || {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bs = &vb[s * k * n..(s + 1) * k * n];
                        let out = &mut da[s * m * k..(s + 1) * m * k];
                        if ta {
                            // stored k x m: op(b) * g^T
                            T::gemm(k, n, m, T::one(), bs, tb, gs, true, T::zero(), out);
                        } else {
                            // m x k: g * op(b)^T
                            T::gemm(m, n, k, T::one(), gs, false, bs, !tb, T::zero(), out);
                        }
                    }
                    da
                });
                emit(b, &mut || {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let as_ = &va[s * m * k..(s + 1) * m * k];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if tb {
                            // stored n x k: g^T * op(a)
                            T::gemm(n, m, k, T::one(), gs, true, as_, ta, T::zero(), out);
                        } else {
                            // k x n: op(a)^T * g
                            T::gemm(k, m, n, T::one(), as_, !ta, gs, false, T::zero(), out);
                        }
                    }
                    db
                });
            }
            Op::Reshape(x) => emit(*x, &mut || g.to_vec()),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                emit(*x, &mut || permute_data(&gt, &inverse).into_data());
            }
            &Op::Softmax { x, inner, axis_len } => {
                let y = node.value.data();
                emit(x, &mut || {
                    let mut dx = vec![T::zero(); y.len()];
                    if inner == 1 {
                        for ((d, yr), gr) in dx
                            .chunks_mut(axis_len)
                            .zip(y.chunks(axis_len))
                            .zip(g.chunks(axis_len))
                        {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((o, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                                *o = yv * (gv - dot);
                            }
                        }
                        return dx;
                    }
                    let outer = y.len() / (inner * axis_len);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * axis_len + a) * inner + i;
                            let dot: T = (0..axis_len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..axis_len {
                                dx[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                    dx
                });
            }
            &Op::LogSoftmax { x, inner, axis_len } => {
                let y = node.value.data();
                emit(x, &mut || {
                    let mut dx = vec![T::zero(); y.len()];
                    let outer = y.len() / (inner * axis_len);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * axis_len + a) * inner + i;
                            let total: T = (0..axis_len).map(|a| g[idx(a)]).sum();
                            for a in 0..axis_len {
                                dx[idx(a)] = g[idx(a)] - y[idx(a)].exp() * total;
                            }
                        }
                    }
                    dx
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let rows = rstd.len();
                let gv = self.value(*gamma).data();
                emit(*x, &mut || {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            dx[r * d + c] =
                                rstd[r] / dn * (dn * dh - sum_dh - xhat[r * d + c] * sum_dh_h);
                        }
                    }
                    dx
                });
                emit(*gamma, &mut || {
                    let mut dg = vec![T::zero(); d];
                    for (idx, &e) in g.iter().enumerate() {
                        dg[idx % d] += e * xhat[idx];
                    }
                    dg
                });
                emit(*beta, &mut || {
                    let mut db = vec![T::zero(); d];
                    for (idx, &e) in g.iter().enumerate() {
                        db[idx % d] += e;
                    }
                    db
                });
            }
            Op::Gelu(x, slopes) => {
                emit(*x, &mut || g.iter().zip(slopes).map(|(&e, &s)| e * s).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                emit(*x, &mut || {
                    g.iter()
                        .zip(xv)
                        .map(|(&e, &v)| if v > T::zero() { e } else { T::zero() })
                        .collect()
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                emit(*x, &mut || {
                    g.iter().zip(y).map(|(&e, &t)| e * (T::one() - t * t)).collect()
                });
            }
            Op::Dropout(x, mask) => {
                emit(*x, &mut || g.iter().zip(mask).map(|(&e, &m)| e * m).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                emit(*x, &mut || vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                emit(*x, &mut || vec![g[0] / T::of(n as f64); n]);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    emit(p, &mut || {
                        let mut dp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total + offset;
                            dp.extend_from_slice(&g[start..start + len]);
                        }
                        dp
                    });
                    offset += len;
                }
            }
            &Op::Select { x, axis, index } => {
                let (outer, d, inner) = split_axis(self.shape(x), axis);
                emit(x, &mut || {
                    let mut dx = vec![T::zero(); outer * d * inner];
                    for o in 0..outer {
                        let start = (o * d + index) * inner;
                        dx[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                    dx
                });
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table);
                let (vocab, d) = (shape[0], shape[1]);
                emit(*table, &mut || {
                    let mut dt = vec![T::zero(); vocab * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += g[row * d + c];
                        }
                    }
                    dt
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = T::of(2.0) * g[0] / T::of(va.len() as f64);
                emit(*a, &mut || {
                    va.iter().zip(vb).map(|(&x, &y)| scale * (x - y)).collect()
                });
                emit(*b, &mut || {
                    va.iter().zip(vb).map(|(&x, &y)| scale * (y - x)).collect()
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits);
                let (b, v) = (shape[0], shape[1]);
                let scale = g[0] / T::of(b as f64);
                emit(*logits, &mut || {
                    let mut dx = vec![T::zero(); b * v];
                    for r in 0..b {
                        let mass: T = targets[r * v..(r + 1) * v].iter().copied().sum();
                        for c in 0..v {
                            dx[r * v + c] = scale * (probs[r * v + c] * mass - targets[r * v + c]);
                        }
                    }
                    dx
                });
            }
            Op::L2Normalize { x, norms, eps } => {
                let y = node.value.data();
                let d = y.len() / norms.len().max(1);
                emit(*x, &mut || {
                    let mut dx = vec![T::zero(); y.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        if n > *eps {
                            let dot: T = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                            for c in row {
                                dx[c] = (g[c] - y[c] * dot) / n;
                            }
                        } else {
                            for c in row {
                                dx[c] = g[c] / n;
                            }
                        }
                    }
                    dx
                });
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn permute_data<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    if rank == 0 || src.is_empty() {
        return Tensor::new(out_shape, src.to_vec()).expect("permuted shape");
    }
    // walk all but the last output axis; the last one is a strided run
    let (run, step) = (out_shape[rank - 1], strides[rank - 1]);
    let mut index = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..src.len() / run {
        if step == 1 {
            data.extend_from_slice(&src[base..base + run]);
        } else {
            data.extend((0..run).map(|r| src[base + r * step]));
        }
        for ax in (0..rank - 1).rev() {
            index[ax] += 1;
            base += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permuted shape")
}
