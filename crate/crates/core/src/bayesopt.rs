//! Expected-improvement Bayesian optimization on additive benchmark functions.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{invalid, numeric, NknError, Result};
use crate::gp::{GpModel, Posterior, Standardizer};
use crate::nkn::{preset, InitContext, ParameterStore, Preset};
use crate::points::Points;
use crate::primitives::softplus_inv;
use crate::train::{fit_with_state, AdamState, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkKind {
    Stybtang,
    Michalewicz,
    StybtangTransform,
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Stybtang => "stybtang",
            Self::Michalewicz => "michalewicz",
            Self::StybtangTransform => "stybtang_transform",
        })
    }
}

impl FromStr for BenchmarkKind {
    type Err = NknError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stybtang" => Ok(Self::Stybtang),
            "michalewicz" => Ok(Self::Michalewicz),
            "stybtang_transform" => Ok(Self::StybtangTransform),
            other => Err(invalid(format!(
                "unknown benchmark {other:?}; expected stybtang, michalewicz or stybtang_transform"
            ))),
        }
    }
}

/// Block-diagonal orthonormal rotation over a partition of the dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub partition: Vec<Vec<usize>>,
    /// One row-major `|P_i| x |P_i|` orthonormal block per part.
    pub blocks: Vec<Vec<f64>>,
}

impl Rotation {
    pub fn identity(d: usize) -> Self {
        Self { partition: (0..d).map(|i| vec![i]).collect(), blocks: vec![vec![1.0]; d] }
    }

    /// Random partition into parts of 1 to 3 dimensions with Haar-random
    /// orthonormal blocks.
    pub fn random(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims: Vec<usize> = (0..d).collect();
        dims.shuffle(&mut rng);
        let mut partition = Vec::new();
        let mut rest = &dims[..];
        while !rest.is_empty() {
            let k = rng.random_range(1..=3usize).min(rest.len());
            let mut part = rest[..k].to_vec();
            part.sort_unstable();
            partition.push(part);
            rest = &rest[k..];
        }
        let blocks = partition
            .iter()
            .map(|p| {
                let k = p.len();
                let g = DMatrix::<f64>::from_fn(k, k, |_, _| rng.sample(StandardNormal));
                let qr = g.qr();
                let (mut q, r) = (qr.q(), qr.r());
                for j in 0..k {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                q.transpose().as_slice().to_vec()
            })
            .collect();
        Self { partition, blocks }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let mut seen = vec![false; d];
        for (p, b) in self.partition.iter().zip(&self.blocks) {
            let k = p.len();
            if b.len() != k * k {
                return Err(invalid("rotation block size does not match its part"));
            }
            for &i in p {
                if i >= d || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid("rotation partition must cover each dimension exactly once"));
                }
            }
            let q = DMatrix::from_row_slice(k, k, b);
            if (&q * q.transpose() - DMatrix::identity(k, k)).abs().max() > 1e-9 {
                return Err(invalid("rotation block is not orthonormal"));
            }
        }
        if self.partition.len() != self.blocks.len() || seen.iter().any(|s| !s) {
            return Err(invalid("rotation partition must cover each dimension exactly once"));
        }
        Ok(())
    }

    /// `Q x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for (p, b) in self.partition.iter().zip(&self.blocks) {
            let k = p.len();
            for (r, &i) in p.iter().enumerate() {
                out[i] = p.iter().enumerate().map(|(c, &j)| b[r * k + c] * x[j]).sum();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub kind: BenchmarkKind,
    pub d: usize,
    pub domain: Vec<(f64, f64)>,
    /// Michalewicz steepness.
    pub m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Rotation>,
}

impl Benchmark {
    /// Standard domain; the transformed variant draws its rotation from `seed`.
    pub fn new(kind: BenchmarkKind, d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("benchmark dimension must be at least 1"));
        }
        let (domain, rotation) = match kind {
            BenchmarkKind::Stybtang => (vec![(-4.0, 4.0); d], None),
            BenchmarkKind::Michalewicz => (vec![(0.0, std::f64::consts::PI); d], None),
            BenchmarkKind::StybtangTransform => (vec![(-4.0, 4.0); d], Some(Rotation::random(d, seed))),
        };
        Ok(Self { kind, d, domain, m: 10.0, rotation })
    }

    pub fn with_rotation(mut self, r: Rotation) -> Result<Self> {
        r.validate(self.d)?;
        self.rotation = Some(r);
        Ok(self)
    }

    /// Additive groups of the function, used by the oracle surrogate.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        match &self.rotation {
            Some(r) if self.kind == BenchmarkKind::StybtangTransform => r.partition.clone(),
            _ => (0..self.d).map(|i| vec![i]).collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.d {
            return Err(invalid(format!("point has {} coordinates, benchmark has {}", x.len(), self.d)));
        }
        for (i, (v, (lo, hi))) in x.iter().zip(&self.domain).enumerate() {
            let tol = 1e-12 * (hi - lo);
            if !(*v >= lo - tol && *v <= hi + tol) {
                return Err(invalid(format!("coordinate {i} = {v} outside [{lo}, {hi}]")));
            }
        }
        Ok(match self.kind {
            BenchmarkKind::Stybtang => stybtang(x),
            BenchmarkKind::StybtangTransform => match &self.rotation {
                Some(r) => stybtang(&r.apply(x)),
                None => stybtang(x),
            },
            BenchmarkKind::Michalewicz => -x
                .iter()
                .enumerate()
                .map(|(i, v)| v.sin() * ((i + 1) as f64 * v * v / std::f64::consts::PI).sin().powf(2.0 * self.m))
                .sum::<f64>(),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.domain.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect()
    }
}

fn stybtang(x: &[f64]) -> f64 {
    0.5 * x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>()
}

/// Expected improvement below `best` for each predictive marginal.
pub fn expected_improvement(post: &Posterior, best: f64) -> Vec<f64> {
    post.mean
        .iter()
        .zip(&post.variance)
        .map(|(&mu, &var)| {
            let s = var.max(0.0).sqrt();
            let diff = best - mu;
            if s > 0.0 {
                let z = diff / s;
                let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
                let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (diff * cdf + s * pdf).max(0.0)
            } else {
                diff.max(0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub iters: usize,
    pub initial_points: usize,
    /// Adam steps per refit, warm-started from the previous parameters.
    pub refit_steps: usize,
    pub lr: f64,
    pub pool_size: usize,
    pub shared_lengthscale: bool,
    /// Consecutive surrogate failures tolerated before aborting.
    pub max_failures: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            iters: 100,
            initial_points: 10,
            refit_steps: 500,
            lr: 0.01,
            pool_size: 2000,
            shared_lengthscale: true,
            max_failures: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub seed: u64,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Best value after the initial design (entry 0) and after each iteration.
    pub best: Vec<f64>,
    pub wallclock: Vec<f64>,
    /// Iterations whose surrogate failed, with the error message.
    pub failures: Vec<(usize, String)>,
}

impl BoTrace {
    pub fn final_best(&self) -> f64 {
        *self.best.last().expect("initial design recorded")
    }

    /// Columns `seed, iter, best, wallclock`.
    pub fn write_csv<W: Write>(&self, w: W, header: bool) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        let e = |e: csv::Error| NknError::Parse(e.to_string());
        if header {
            wr.write_record(["seed", "iter", "best", "wallclock"]).map_err(e)?;
        }
        for (i, (b, t)) in self.best.iter().zip(&self.wallclock).enumerate() {
            wr.write_record([self.seed.to_string(), i.to_string(), format!("{b:?}"), format!("{t:.6}")])
                .map_err(e)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// BO with a fresh uniform candidate pool every iteration.
pub fn run_bo(bench: &Benchmark, surrogate: &Preset, cfg: &BoConfig, seed: u64) -> Result<BoTrace> {
    run_bo_with_pool(bench, surrogate, cfg, seed, |b, n, rng| (0..n).map(|_| b.sample(rng)).collect())
}

/// BO drawing candidates from `pool(bench, pool_size, rng)`.
pub fn run_bo_with_pool<F>(bench: &Benchmark, surrogate: &Preset, cfg: &BoConfig, seed: u64, mut pool: F) -> Result<BoTrace>
where
    F: FnMut(&Benchmark, usize, &mut ChaCha8Rng) -> Vec<Vec<f64>>,
{
    if cfg.iters == 0 || cfg.initial_points == 0 || cfg.pool_size == 0 {
        return Err(invalid("iters, initial_points and pool_size must be at least 1"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = bench.d;
    let mut xs: Vec<Vec<f64>> = (0..cfg.initial_points).map(|_| bench.sample(&mut rng)).collect();
    let mut ys = xs.iter().map(|x| bench.eval(x)).collect::<Result<Vec<_>>>()?;
    let mut best = vec![min(&ys)];
    let mut wallclock = vec![start.elapsed().as_secs_f64()];
    let mut failures = Vec::new();

    // Inputs are scaled by the domain, not the data, so warm starts stay meaningful.
    let x_mean: Vec<f64> = bench.domain.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let x_scale: Vec<f64> = bench.domain.iter().map(|(lo, hi)| (hi - lo) / 12f64.sqrt()).collect();
    let std_x = |x: &Points| {
        Standardizer { x_mean: x_mean.clone(), x_scale: x_scale.clone(), y_mean: 0.0, y_scale: 1.0 }.transform_x(x)
    };
    let fresh = |init_seed: u64, x: &Points| -> Result<(crate::NetworkSpec, ParameterStore)> {
        let mut ctx = InitContext::from_points(&std_x(x), init_seed);
        ctx.shared_lengthscale = cfg.shared_lengthscale;
        let spec = preset(surrogate, &ctx)?;
        let store = ParameterStore::from_spec(&spec, softplus_inv(crate::gp::DEFAULT_NOISE_VARIANCE))?;
        Ok((spec, store))
    };
    let tcfg = TrainConfig { iters: cfg.refit_steps.max(1), lr: cfg.lr, log_every: 0, seed, ..TrainConfig::default() };
    let mut state: Option<(crate::NetworkSpec, ParameterStore, AdamState)> = None;
    let mut consecutive = 0;

    for it in 1..=cfg.iters {
        let x = Points::from_rows(&xs)?;
        let candidates = pool(bench, cfg.pool_size, &mut rng);
        let outcome = (|| -> Result<(Vec<f64>, crate::NetworkSpec, ParameterStore, AdamState)> {
            let (spec, store, mut adam) = match state.take() {
                Some(s) => s,
                None => {
                    let (spec, store) = fresh(seed.wrapping_mul(1_000_003).wrapping_add(it as u64), &x)?;
                    let n = store.flat.len();
                    (spec, store, AdamState::new(n))
                }
            };
            let y_mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let y_sd = (ys.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
            let st = Standardizer {
                x_mean: x_mean.clone(),
                x_scale: x_scale.clone(),
                y_mean,
                y_scale: if y_sd > 0.0 { y_sd } else { 1.0 },
            };
            let mut model = GpModel::with_standardizer(spec, store, &x, &ys, st)?;
            if cfg.refit_steps > 0 {
                fit_with_state(&mut model, &tcfg, &mut adam)?;
            }
            let cand = Points::from_rows(&candidates)?;
            let post = model.predict(&cand)?;
            if post.mean.iter().chain(&post.variance).any(|v| !v.is_finite()) {
                return Err(numeric("surrogate produced non-finite predictions"));
            }
            let ei = expected_improvement(&post, min(&ys));
            Ok((ei, model.spec, model.store, adam))
        })();
        let next = match outcome {
            Ok((ei, spec, store, adam)) => {
                consecutive = 0;
                state = Some((spec, store, adam));
                let mut arg = 0;
                for (i, v) in ei.iter().enumerate() {
                    if *v > ei[arg] {
                        arg = i;
                    }
                }
                candidates[arg].clone()
            }
            Err(NknError::Numeric(msg)) => {
                consecutive += 1;
                failures.push((it, msg.clone()));
                if consecutive > cfg.max_failures {
                    return Err(numeric(format!(
                        "surrogate failed {consecutive} consecutive times, last at iteration {it}: {msg}"
                    )));
                }
                // Resample: query a random point and reinitialize the surrogate.
                state = None;
                bench.sample(&mut rng)
            }
            Err(e) => return Err(e),
        };
        debug_assert_eq!(next.len(), d);
        ys.push(bench.eval(&next)?);
        xs.push(next);
        best.push(best.last().copied().unwrap_or(f64::INFINITY).min(*ys.last().expect("pushed")));
        wallclock.push(start.elapsed().as_secs_f64());
    }
    Ok(BoTrace { seed, x: xs, y: ys, best, wallclock, failures })
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(mu: f64, var: f64) -> Posterior {
        Posterior { mean: vec![mu], variance: vec![var] }
    }

    #[test]
    fn benchmark_reference_values() {
        let s = Benchmark::new(BenchmarkKind::Stybtang, 10, 0).unwrap();
        assert!((s.eval(&[-2.903534; 10]).unwrap() + 391.66).abs() < 0.01);
        assert_eq!(s.eval(&[0.0; 10]).unwrap(), 0.0);
        let m = Benchmark::new(BenchmarkKind::Michalewicz, 10, 0).unwrap();
        assert_eq!(m.eval(&[0.0; 10]).unwrap(), 0.0);
        assert!(s.eval(&[5.0; 10]).is_err());
    }

    #[test]
    fn michalewicz_2d_optimum() {
        let m = Benchmark::new(BenchmarkKind::Michalewicz, 2, 0).unwrap();
        assert!((m.eval(&[2.20, 1.57]).unwrap() + 1.8013).abs() < 1e-3);
    }

    #[test]
    fn identity_rotation_reproduces_stybtang() {
        let s = Benchmark::new(BenchmarkKind::Stybtang, 4, 0).unwrap();
        let t = Benchmark::new(BenchmarkKind::StybtangTransform, 4, 0)
            .unwrap()
            .with_rotation(Rotation::identity(4))
            .unwrap();
        let x = [0.3, -2.0, 3.9, -4.0];
        assert_eq!(s.eval(&x).unwrap(), t.eval(&x).unwrap());
    }

    #[test]
    fn random_rotation_is_orthonormal_and_seeded() {
        let r = Rotation::random(10, 5);
        r.validate(10).unwrap();
        assert_eq!(r, Rotation::random(10, 5));
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y = r.apply(&x);
        let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!((n(&x) - n(&y)).abs() < 1e-12);
    }

    #[test]
    fn ei_closed_forms() {
        assert_eq!(expected_improvement(&post(1.0, 0.0), 1.0)[0], 0.0);
        assert!((expected_improvement(&post(1.0, 1.0), 1.0)[0] - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!((expected_improvement(&post(-9.0, 1e-30), 1.0)[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn forced_pool_queries_optimum() {
        let b = Benchmark::new(BenchmarkKind::Stybtang, 2, 0).unwrap();
        let cfg = BoConfig { iters: 1, refit_steps: 5, pool_size: 1, ..BoConfig::default() };
        let opt = vec![-2.903534, -2.903534];
        let t = run_bo_with_pool(&b, &Preset::Rbf, &cfg, 1, |_, _, _| vec![opt.clone()]).unwrap();
        assert_eq!(t.x.last().unwrap(), &opt);
        assert_eq!(t.final_best(), b.eval(&opt).unwrap());
    }
}
