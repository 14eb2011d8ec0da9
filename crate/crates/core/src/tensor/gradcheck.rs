//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it stays
//! independent of the backward rules it audits.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Floor added to `|fd|` in the relative error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - fd| / (|fd| + 1e-8)` over all checked entries.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Compares backward-pass gradients of a scalar function of `inputs`
/// against central differences with step `eps`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::shape("gradient check needs a scalar output"));
        }
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_err(analytic[i][e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, e);
                report.analytic = analytic[i][e];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
