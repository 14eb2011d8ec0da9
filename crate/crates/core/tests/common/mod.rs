//! Finite-difference suite shared by the op tests and the acceptance run.
#![allow(dead_code)]

use alpkd::alignment::{make_full_span_plan, make_pkd_plan};
use alpkd::encoder::{EncoderConfig, TokenBatch};
use alpkd::fusion::{alp_fuse, ckd_fuse, kqv_fuse, Fusion, FusionKind};
use alpkd::losses::{alp_loss, ce_loss, kd_loss, pkd_loss};
use alpkd::tensor::gradcheck::{check_gradients, GradCheckReport, DEFAULT_EPS};
use alpkd::tensor::{Tensor, Var};
use alpkd::{Encoder64, Graph64, Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed pseudo-random weights so every
/// output element carries an O(1) gradient.
pub fn weighted_sum(g: &mut Graph64, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(x), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

pub type Build = fn(&mut Graph64, &[Var]) -> Result<Var>;

/// Every differentiable graph op, plus the fusion and loss compositions.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("add", vec![vec![5], vec![5]], |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 10)
        }),
        ("sub", vec![vec![5], vec![5]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, 11)
        }),
        ("mul", vec![vec![5], vec![5]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 12)
        }),
        ("add_bias", vec![vec![2, 5], vec![5]], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y, 13)
        }),
        ("scale", vec![vec![5]], |g, v| {
            let y = g.scale(v[0], -2.5);
            weighted_sum(g, y, 14)
        }),
        ("mean", vec![vec![5]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }),
        ("sum", vec![vec![5]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 30)
        }),
        ("matmul_t_nt", vec![vec![3, 4], vec![2, 4]], |g, v| {
            let y = g.matmul_t(v[0], v[1], false, true)?;
            weighted_sum(g, y, 31)
        }),
        ("matmul_t_tn", vec![vec![4, 3], vec![4, 2]], |g, v| {
            let y = g.matmul_t(v[0], v[1], true, false)?;
            weighted_sum(g, y, 32)
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let y = g.bmm(v[0], v[1], false, false)?;
            weighted_sum(g, y, 33)
        }),
        ("bmm_nt", vec![vec![2, 3, 4], vec![2, 2, 4]], |g, v| {
            let y = g.bmm(v[0], v[1], false, true)?;
            weighted_sum(g, y, 34)
        }),
        ("softmax", vec![vec![5]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 15)
        }),
        ("softmax_axis0", vec![vec![5, 2]], |g, v| {
            let y = g.softmax(v[0], 0)?;
            weighted_sum(g, y, 16)
        }),
        ("softmax_rows", vec![vec![3, 4]], |g, v| {
            let y = g.softmax(v[0], 1)?;
            weighted_sum(g, y, 27)
        }),
        ("log_softmax", vec![vec![5]], |g, v| {
            let y = g.log_softmax(v[0], 0)?;
            weighted_sum(g, y, 17)
        }),
        ("log_softmax_rows", vec![vec![3, 4]], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            weighted_sum(g, y, 28)
        }),
        ("layer_norm", vec![vec![2, 5], vec![5], vec![5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-12)?;
            weighted_sum(g, y, 18)
        }),
        ("gelu", vec![vec![5]], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 19)
        }),
        ("relu", vec![vec![5]], |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, 20)
        }),
        ("tanh", vec![vec![5]], |g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, 21)
        }),
        ("dropout", vec![vec![4, 5]], |g, v| {
            // same mask on every evaluation
            let mut rng = ChaCha8Rng::seed_from_u64(35);
            let y = g.dropout(v[0], 0.3, &mut rng);
            weighted_sum(g, y, 36)
        }),
        ("concat", vec![vec![5, 1], vec![5, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            weighted_sum(g, y, 22)
        }),
        ("mse", vec![vec![5], vec![5]], |g, v| g.mse(v[0], v[1])),
        ("soft_cross_entropy", vec![vec![1, 5]], |g, v| {
            let t = Tensor::from_f64(vec![1, 5], &[0.1, 0.2, 0.3, 0.15, 0.25])?;
            g.soft_cross_entropy(v[0], &t)
        }),
        ("l2_normalize", vec![vec![5]], |g, v| {
            let y = g.l2_normalize(v[0], 1e-12)?;
            weighted_sum(g, y, 23)
        }),
        ("reshape_permute", vec![vec![1, 5, 2]], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, &[10])?;
            let y = g.tanh(y);
            weighted_sum(g, y, 24)
        }),
        ("head_split_permute", vec![vec![2, 3, 2, 2]], |g, v| {
            let y = g.permute(v[0], &[0, 2, 1, 3])?;
            weighted_sum(g, y, 29)
        }),
        ("select", vec![vec![5, 3]], |g, v| {
            let y = g.select(v[0], 1, 2)?;
            weighted_sum(g, y, 25)
        }),
        ("embedding", vec![vec![5, 2]], |g, v| {
            let y = g.embedding(v[0], &[4, 0, 4, 2])?;
            weighted_sum(g, y, 26)
        }),
        ("ce_loss", vec![vec![3, 4]], |g, v| ce_loss(g, v[0], &[2, 0, 3])),
        ("kd_loss", vec![vec![3, 4]], |g, v| {
            let t = Tensor::from_f64(vec![3, 4], &[0.5, -1.0, 2.0, 0.0, 1.5, 0.2, -0.3, 0.9, -2.0, 0.4, 0.4, 1.0])?;
            kd_loss(g, v[0], &t, 5.0, false)
        }),
        ("alp_fuse", vec![vec![2, 6], vec![2, 6], vec![2, 6], vec![2, 6]], |g, v| {
            let out = alp_fuse(g, v[0], &v[1..])?;
            weighted_sum(g, out.fused, 37)
        }),
        ("kqv_fuse", vec![vec![2, 4], vec![2, 4], vec![2, 4], vec![4, 4], vec![4, 4], vec![4, 4]], |g, v| {
            let out = kqv_fuse(g, v[0], &v[1..3], v[3], v[4], v[5], 2)?;
            weighted_sum(g, out.fused, 38)
        }),
        ("ckd_fuse", vec![vec![2, 3], vec![2, 3], vec![6, 3]], |g, v| {
            let out = ckd_fuse(g, &v[..2], v[2])?;
            weighted_sum(g, out.fused, 39)
        }),
        ("pkd_and_alp_losses", vec![vec![2, 4], vec![2, 4]], |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(40);
            let pkd = make_pkd_plan(3, 2, &[Some(1), Some(3)])?;
            let full = make_full_span_plan(3, 2)?;
            let fusion = Fusion::<f64>::new(FusionKind::AlpDot, &full, 4, 2)?;
            let t: Vec<_> = (0..3).map(|_| g.constant(random(&[2, 4], &mut rng))).collect();
            let a = pkd_loss(g, v, &pkd, &t)?;
            let b = alp_loss(g, v, &full, &t, &fusion, &[])?;
            g.add(a.total, b.total)
        }),
    ]
}

pub fn run_op_cases(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, shapes, build)| {
            let inputs: Vec<Tensor64> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            (name, check_gradients(&inputs, build, DEFAULT_EPS).unwrap())
        })
        .collect()
}

/// Whole 1-layer encoder, with one padded row, against every parameter.
pub fn encoder_report() -> GradCheckReport {
    // init scale large enough that attention is far from uniform, so no
    // gradient entry sits at the finite-difference noise floor
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 12,
        max_seq_len: 8,
        num_classes: 3,
        dropout_rate: 0.0,
        init_std: 0.5,
        ..EncoderConfig::default()
    };
    let enc = Encoder64::new(cfg, 11).unwrap();
    let ids = vec![1, 4, 7, 9, 5, 1, 6, 8, 0, 0];
    let mask = vec![true, true, true, true, true, true, true, true, false, false];
    let tokens = TokenBatch {
        ids: &ids,
        mask: &mask,
        batch: 2,
        seq_len: 5,
    };
    let inputs: Vec<Tensor64> = enc.params().ids().map(|id| enc.params().value(id).clone()).collect();
    check_gradients(
        &inputs,
        |g, vars| {
            let out = enc.forward(g, vars, &tokens, None)?;
            let ce = ce_loss(g, out.logits, &[1, 2])?;
            // also route gradient through the CLS state directly
            let cls = g.tanh(out.cls[0]);
            let cls = g.mean(cls);
            g.add(ce, cls)
        },
        DEFAULT_EPS,
    )
    .unwrap()
}
