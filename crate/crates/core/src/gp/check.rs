//! Finite-difference check of the marginal-likelihood gradient.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::GpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a - n| / max(|a|, |n|, floor)` per parameter.
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub worst: usize,
}

/// Compares the analytic gradient with five-point central differences of
/// step `h * max(1, |theta|)`.
pub fn gradcheck(model: &GpModel, h: f64, floor: f64) -> Result<GradCheck> {
    let analytic = model.grad_log_marginal()?;
    let base = model.params().to_vec();
    let mut m = model.clone();
    let mut at = |k: usize, v: f64| -> Result<f64> {
        let mut p = base.clone();
        p[k] = v;
        m.set_params(&p)?;
        m.log_marginal_likelihood()
    };
    let mut numeric = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let s = h * base[k].abs().max(1.0);
        let (f2, f1) = (at(k, base[k] + 2.0 * s)?, at(k, base[k] + s)?);
        let (b1, b2) = (at(k, base[k] - s)?, at(k, base[k] - 2.0 * s)?);
        numeric.push((8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * s));
    }
    let rel_err: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    let (worst, max_rel_err) =
        rel_err.iter().copied().enumerate().fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheck { analytic, numeric, rel_err, max_rel_err, worst })
}
