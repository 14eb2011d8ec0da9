//! BERT-style post-layer-norm transformer encoder with CLS classification.
//!
//! The same type serves as teacher (n layers) and student (m layers).
//! Parameters live in a [`ParamStore`] in a fixed declaration order that the
//! checkpoint format relies on.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    /// Standard deviation of the normal initializer for weight matrices.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 16,
            max_seq_len: 64,
            num_classes: 2,
            dropout_rate: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::config("layer_norm_eps and init_std must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        Self {
            num_layers,
            ..self.clone()
        }
    }

    /// Names and shapes of every parameter, in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden_dim, self.ffn_dim);
        let mut out = vec![
            ("embeddings.word".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position".to_string(), vec![self.max_seq_len, d]),
            ("embeddings.ln.gamma".to_string(), vec![d]),
            ("embeddings.ln.beta".to_string(), vec![d]),
        ];
        for l in 0..self.num_layers {
            for (suffix, shape) in LAYER_PARAMS {
                let shape = shape
                    .iter()
                    .map(|s| match s {
                        Dim::Hidden => d,
                        Dim::Ffn => f,
                    })
                    .collect();
                out.push((format!("layer.{l}.{suffix}"), shape));
            }
        }
        out.push(("classifier.weight".to_string(), vec![d, self.num_classes]));
        out.push(("classifier.bias".to_string(), vec![self.num_classes]));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

enum Dim {
    Hidden,
    Ffn,
}

// No key bias: it shifts every score of a query equally, which softmax
// cancels, so it would never receive a gradient.
const LAYER_PARAMS: [(&str, &[Dim]); 15] = [
    ("attn.query.weight", &[Dim::Hidden, Dim::Hidden]),
    ("attn.query.bias", &[Dim::Hidden]),
    ("attn.key.weight", &[Dim::Hidden, Dim::Hidden]),
    ("attn.value.weight", &[Dim::Hidden, Dim::Hidden]),
    ("attn.value.bias", &[Dim::Hidden]),
    ("attn.output.weight", &[Dim::Hidden, Dim::Hidden]),
    ("attn.output.bias", &[Dim::Hidden]),
    ("ln1.gamma", &[Dim::Hidden]),
    ("ln1.beta", &[Dim::Hidden]),
    ("ffn.input.weight", &[Dim::Hidden, Dim::Ffn]),
    ("ffn.input.bias", &[Dim::Ffn]),
    ("ffn.output.weight", &[Dim::Ffn, Dim::Hidden]),
    ("ffn.output.bias", &[Dim::Hidden]),
    ("ln2.gamma", &[Dim::Hidden]),
    ("ln2.beta", &[Dim::Hidden]),
];

const EMBEDDING_PARAMS: usize = 4;

/// A batch of token ids laid out `[batch, seq_len]`, with position 0 the CLS
/// token and `mask[i]` false on padding.
#[derive(Clone, Copy, Debug)]
pub struct TokenBatch<'a> {
    pub ids: &'a [usize],
    pub mask: &'a [bool],
    pub batch: usize,
    pub seq_len: usize,
}

/// Vars produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Full sequence states per layer, each `[batch, seq_len, hidden]`.
    pub sequence: Vec<Var>,
    /// CLS state per layer, each `[batch, hidden]`.
    pub cls: Vec<Var>,
    /// `[batch, num_classes]`.
    pub logits: Var,
}

/// Plain values of a forward pass without gradient tracking.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub cls: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Fresh encoder: normal(0, init_std) weights and embeddings, zero
    /// biases, unit layer-norm gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_layout() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("gamma") {
                vec![T::one(); n]
            } else if name.ends_with("bias") || name.ends_with("beta") {
                vec![T::zero(); n]
            } else {
                (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
            };
            params.add(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(params.ids())
                .any(|((name, shape), id)| params.name(id) != name || params.value(id).shape() != shape.as_slice())
        {
            return Err(Error::ConfigMismatch(
                "parameter layout does not match encoder config".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Index of the first parameter of layer `l` (0-based).
    fn layer_offset(l: usize) -> usize {
        EMBEDDING_PARAMS + l * LAYER_PARAMS.len()
    }

    fn check_tokens(&self, tokens: &TokenBatch<'_>) -> Result<()> {
        let expected = tokens.batch * tokens.seq_len;
        if tokens.ids.len() != expected || tokens.mask.len() != expected {
            return Err(Error::input(format!(
                "token batch declares {}x{} but holds {} ids and {} mask entries",
                tokens.batch,
                tokens.seq_len,
                tokens.ids.len(),
                tokens.mask.len()
            )));
        }
        if tokens.seq_len == 0 || tokens.seq_len > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} outside 1..={}",
                tokens.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `g` over parameters previously bound with
    /// [`ParamStore::bind`] (trainable) or [`ParamStore::bind_frozen`].
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &[Var],
        tokens: &TokenBatch<'_>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if bound.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} bound vars for {} encoder parameters",
                bound.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let (b, s, d) = (tokens.batch, tokens.seq_len, cfg.hidden_dim);
        let (heads, hd) = (cfg.num_heads, cfg.head_dim());
        let rate = if dropout_rng.is_some() { cfg.dropout_rate } else { 0.0 };
        let eps = T::of(cfg.layer_norm_eps);

        let mut drop = |g: &mut Graph<T>, x: Var| -> Var {
            match dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(x, rate, rng),
                None => x,
            }
        };

        // embeddings
        let words = g.embedding(bound[0], tokens.ids)?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = g.embedding(bound[1], &positions)?;
        let x = g.add(words, pos)?;
        let x = g.layer_norm(x, bound[2], bound[3], eps)?;
        let mut x = drop(g, x);

        // additive key mask, [b * heads, s, s]; skipped for unpadded batches
        let mask = if tokens.mask.iter().all(|&keep| keep) {
            None
        } else {
            let neg = T::of(-1e9);
            let mut mask = Vec::with_capacity(b * heads * s * s);
            for bi in 0..b {
                let row: Vec<T> = tokens.mask[bi * s..(bi + 1) * s]
                    .iter()
                    .map(|&keep| if keep { T::zero() } else { neg })
                    .collect();
                for _ in 0..heads * s {
                    mask.extend_from_slice(&row);
                }
            }
            Some(g.constant(Tensor::new(vec![b * heads, s, s], mask)?))
        };
        let inv_sqrt = T::of(1.0 / (hd as f64).sqrt());

        let mut sequence = Vec::with_capacity(cfg.num_layers);
        let mut cls = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = &bound[Self::layer_offset(l)..Self::layer_offset(l + 1)];
            let split_heads = |g: &mut Graph<T>, t: Var| -> Result<Var> {
                let t = g.reshape(t, &[b, s, heads, hd])?;
                let t = g.permute(t, &[0, 2, 1, 3])?;
                g.reshape(t, &[b * heads, s, hd])
            };
            let q = linear(g, x, p[0], p[1])?;
            let q = g.scale(q, inv_sqrt);
            let k = g.matmul(x, p[2])?;
            let v = linear(g, x, p[3], p[4])?;
            let (q, k, v) = (split_heads(g, q)?, split_heads(g, k)?, split_heads(g, v)?);
            let scores = g.bmm(q, k, false, true)?;
            let scores = match mask {
                Some(m) => g.add(scores, m)?,
                None => scores,
            };
            let probs = g.softmax(scores, 2)?;
            let probs = drop(g, probs);
            let ctx = g.bmm(probs, v, false, false)?;
            let ctx = g.reshape(ctx, &[b, heads, s, hd])?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b * s, d])?;
            let attn = linear(g, ctx, p[5], p[6])?;
            let attn = drop(g, attn);
            let h = g.add(x, attn)?;
            let h = g.layer_norm(h, p[7], p[8], eps)?;

            let f = linear(g, h, p[9], p[10])?;
            let f = g.gelu(f);
            let f = linear(g, f, p[11], p[12])?;
            let f = drop(g, f);
            let out = g.add(h, f)?;
            x = g.layer_norm(out, p[13], p[14], eps)?;

            let seq = g.reshape(x, &[b, s, d])?;
            cls.push(g.select(seq, 1, 0)?);
            sequence.push(seq);
        }
        let last = *cls.last().expect("num_layers >= 1");
        let n = bound.len();
        let logits = linear(g, last, bound[n - 2], bound[n - 1])?;
        Ok(ForwardOutput {
            sequence,
            cls,
            logits,
        })
    }

    /// Eval-mode forward pass returning plain tensors.
    pub fn infer(&self, tokens: &TokenBatch<'_>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, tokens, None)?;
        Ok(Inference {
            cls: out.cls.iter().map(|&v| g.value(v).clone()).collect(),
            logits: g.value(out.logits).clone(),
        })
    }

    /// Value-copies the embeddings, the first `m` layers and the classifier
    /// head into a fresh `m`-layer encoder.
    pub fn init_student(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.config.num_layers {
            return Err(Error::config(format!(
                "student depth {m} must be within 1..={} (teacher depth)",
                self.config.num_layers
            )));
        }
        let config = self.config.with_layers(m);
        let mut params = ParamStore::new();
        for (name, _) in config.param_layout() {
            let id = self
                .params
                .find(&name)
                .ok_or_else(|| Error::config(format!("teacher lacks parameter {name}")))?;
            params.add(name, self.params.value(id).clone());
        }
        Self::from_parts(config, params)
    }
}

/// Free-function form of [`Encoder::init_student`].
pub fn init_student_from_teacher<T: Scalar>(teacher: &Encoder<T>, m: usize) -> Result<Encoder<T>> {
    teacher.init_student(m)
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, bias)
}

/// Seeds a run-local RNG; kept here so every dropout stream derives the
/// same way.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f)
}
