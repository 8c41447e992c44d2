//! Adam ascent on the log marginal likelihood.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, NknError, Result};
use crate::gp::GpModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Record the objective every `log_every` iterations (0 disables).
    pub log_every: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 20_000,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            log_every: 100,
            seed: 0,
            clip_norm: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        if self.iters == 0 {
            return Err(invalid("iters must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam step that increases the objective whose gradient is `grad`.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grad: &[f64], cfg: &TrainConfig) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(invalid("Adam state, parameters and gradient differ in length"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(numeric(format!("non-finite gradient entry {i} at step {}", state.t + 1)));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] += cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Rescales `g` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iter: usize,
    pub logml: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_lml: f64,
    pub final_lml: f64,
    pub iters: usize,
    pub seconds: f64,
    pub trace: Vec<TracePoint>,
}

impl FitReport {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "logml", "seconds"]).map_err(csv_err)?;
        for p in &self.trace {
            wr.write_record([p.iter.to_string(), format!("{:?}", p.logml), format!("{:.6}", p.seconds)])
                .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> NknError {
    NknError::Parse(e.to_string())
}

/// Runs `cfg.iters` Adam steps on the model's parameters (noise included).
pub fn fit(model: &mut GpModel, cfg: &TrainConfig) -> Result<FitReport> {
    let mut state = AdamState::new(model.params().len());
    fit_with_state(model, cfg, &mut state)
}

/// [`fit`] continuing from existing moment estimates.
pub fn fit_with_state(model: &mut GpModel, cfg: &TrainConfig, state: &mut AdamState) -> Result<FitReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut params = model.params().to_vec();
    let mut initial = None;
    for it in 0..cfg.iters {
        let (lml, mut grad) = model
            .lml_and_grad()
            .map_err(|e| with_iteration(e, it))?;
        if initial.is_none() {
            initial = Some(lml);
        }
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            trace.push(TracePoint { iter: it, logml: lml, seconds: start.elapsed().as_secs_f64() });
        }
        clip_global_norm(&mut grad, cfg.clip_norm);
        adam_step(&mut params, state, &grad, cfg).map_err(|e| with_iteration(e, it))?;
        model.set_params(&params)?;
    }
    let final_lml = model
        .log_marginal_likelihood()
        .map_err(|e| with_iteration(e, cfg.iters))?;
    let seconds = start.elapsed().as_secs_f64();
    if cfg.log_every > 0 {
        trace.push(TracePoint { iter: cfg.iters, logml: final_lml, seconds });
    }
    Ok(FitReport {
        initial_lml: initial.expect("at least one iteration"),
        final_lml,
        iters: cfg.iters,
        seconds,
        trace,
    })
}

fn with_iteration(e: NknError, it: usize) -> NknError {
    match e {
        NknError::Numeric(m) => NknError::Numeric(format!("iteration {it}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { lr, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &mut s, &[0.0, 0.0], &cfg(0.1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &mut s, &[2.5, -0.01, 40.0], &cfg(0.001)).unwrap();
        for (v, sign) in p.iter().zip([1.0, -1.0, 1.0]) {
            assert!((v - 0.001 * sign).abs() < 1e-6 * 0.001 + 1e-9);
        }
    }

    #[test]
    fn moments_decay_geometrically() {
        let c = cfg(0.01);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &mut s, &[3.0], &c).unwrap();
        let (m1, v1) = (s.m[0], s.v[0]);
        adam_step(&mut p, &mut s, &[0.0], &c).unwrap();
        adam_step(&mut p, &mut s, &[0.0], &c).unwrap();
        assert_eq!(s.m[0], m1 * c.beta1 * c.beta1);
        assert_eq!(s.v[0], v1 * c.beta2 * c.beta2);
    }

    #[test]
    fn non_finite_gradient_aborts_with_step() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let e = adam_step(&mut p, &mut s, &[f64::NAN], &cfg(0.1)).unwrap_err();
        assert!(e.to_string().contains("step 1"));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![3e3, 4e3];
        clip_global_norm(&mut g, 1e3);
        assert!(((g[0] * g[0] + g[1] * g[1]).sqrt() - 1e3).abs() < 1e-9);
    }
}
