use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NknError, Result};
use crate::gp::linalg::SpdFactor;
use crate::matrix::KernelValueMatrix;
use crate::nkn::{backward, forward_gram, kernel_diag, kernel_gram, kernel_matrix, preset, InitContext};
use crate::nkn::{NetworkSpec, ParameterStore, Preset};
use crate::points::Points;
use crate::primitives::{sigmoid, softplus, softplus_inv};

pub const MODEL_SCHEMA: &str = "nkn-model/1";

/// Initial observation-noise variance on the standardized scale.
pub const DEFAULT_NOISE_VARIANCE: f64 = 0.1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-column affine maps applied to inputs and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Self { x_mean: vec![0.0; d], x_scale: vec![1.0; d], y_mean: 0.0, y_scale: 1.0 }
    }

    /// Zero mean and unit variance per column; zero-variance columns keep scale 1.
    pub fn fit(x: &Points, y: &[f64]) -> Self {
        let (x_mean, x_scale) = (0..x.dim()).map(|j| mean_std(&x.column(j))).unzip();
        let (y_mean, y_scale) = mean_std(y);
        Self { x_mean, x_scale, y_mean, y_scale }
    }

    pub fn transform_x(&self, x: &Points) -> Points {
        x.map_rows(|r, out| {
            for j in 0..r.len() {
                out[j] = (r[j] - self.x_mean[j]) / self.x_scale[j];
            }
        })
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_scale).collect()
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_scale + self.y_mean
    }
}

/// Predictive distribution of noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    /// Includes the observation noise.
    pub variance: Vec<f64>,
}

impl Posterior {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn rmse(&self, truth: &[f64]) -> f64 {
        let s: f64 = self.mean.iter().zip(truth).map(|(m, t)| (m - t) * (m - t)).sum();
        (s / truth.len().max(1) as f64).sqrt()
    }

    /// Mean per-point Gaussian log density of `truth`.
    pub fn mean_log_likelihood(&self, truth: &[f64]) -> f64 {
        let s: f64 = self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(truth)
            .map(|((m, v), t)| -0.5 * (LN_2PI + v.ln() + (t - m) * (t - m) / v))
            .sum();
        s / truth.len().max(1) as f64
    }
}

/// Exact GP with an NKN kernel; the noise raw is the last entry of `store`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub spec: NetworkSpec,
    pub store: ParameterStore,
    pub standardizer: Standardizer,
    /// Standardized training inputs.
    pub x: Points,
    /// Standardized training targets.
    pub y: Vec<f64>,
}

/// Cached factorization of `K + sigma^2 I` for repeated prediction.
#[derive(Debug, Clone)]
pub struct FittedPosterior {
    factor: Option<SpdFactor>,
    alpha: DVector<f64>,
}

impl GpModel {
    /// Builds a model on raw data, fitting a standardizer to it.
    pub fn new(spec: NetworkSpec, store: ParameterStore, x: &Points, y: &[f64]) -> Result<Self> {
        let st = Standardizer::fit(x, y);
        Self::with_standardizer(spec, store, x, y, st)
    }

    pub fn with_standardizer(
        spec: NetworkSpec,
        store: ParameterStore,
        x: &Points,
        y: &[f64],
        standardizer: Standardizer,
    ) -> Result<Self> {
        if x.len() != y.len() {
            return Err(invalid(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        if x.dim() != spec.input_dim || standardizer.x_mean.len() != x.dim() {
            return Err(invalid(format!(
                "inputs have {} columns, kernel expects {}",
                x.dim(),
                spec.input_dim
            )));
        }
        if x.as_slice().iter().chain(y).any(|v| !v.is_finite()) {
            return Err(invalid("training data contains non-finite values"));
        }
        if standardizer.x_scale.iter().chain([&standardizer.y_scale]).any(|s| !(*s > 0.0)) {
            return Err(invalid("standardizer scales must be positive"));
        }
        let xs = standardizer.transform_x(x);
        let ys = standardizer.transform_y(y);
        Ok(Self { spec, store, standardizer, x: xs, y: ys })
    }

    /// Model with a freshly initialized preset kernel and noise variance
    /// [`DEFAULT_NOISE_VARIANCE`].
    pub fn from_preset(p: &Preset, x: &Points, y: &[f64], seed: u64, shared_lengthscale: bool) -> Result<Self> {
        let st = Standardizer::fit(x, y);
        let mut ctx = InitContext::from_points(&st.transform_x(x), seed);
        ctx.shared_lengthscale = shared_lengthscale;
        let spec = preset(p, &ctx)?;
        let store = ParameterStore::from_spec(&spec, softplus_inv(DEFAULT_NOISE_VARIANCE))?;
        Self::with_standardizer(spec, store, x, y, st)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        softplus(self.store.noise_raw())
    }

    pub fn params(&self) -> &[f64] {
        &self.store.flat
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.store.flat.len() {
            return Err(invalid("parameter vector length mismatch"));
        }
        self.store.flat.copy_from_slice(flat);
        Ok(())
    }

    /// Replaces the training data, keeping the existing standardizer.
    pub fn set_data(&mut self, x: &Points, y: &[f64]) -> Result<()> {
        let st = self.standardizer.clone();
        let m = Self::with_standardizer(self.spec.clone(), self.store.clone(), x, y, st)?;
        *self = m;
        Ok(())
    }

    fn noisy_gram(&self, k: &KernelValueMatrix) -> DMatrix<f64> {
        let mut a = k.to_dmatrix();
        let s2 = self.noise_variance();
        for i in 0..a.nrows() {
            a[(i, i)] += s2;
        }
        a
    }

    fn lml_from(&self, f: &SpdFactor, alpha: &DVector<f64>) -> f64 {
        let n = self.len() as f64;
        let y = DVector::from_column_slice(&self.y);
        -0.5 * y.dot(alpha) - 0.5 * f.log_det() - 0.5 * n * LN_2PI
    }

    /// `ln N(y | 0, K + sigma^2 I)` on the standardized data.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(invalid("log marginal likelihood needs at least one observation"));
        }
        let k = kernel_gram(&self.spec, &self.store, &self.x)?;
        let f = SpdFactor::new(&self.noisy_gram(&k))?;
        let alpha = f.solve(&DVector::from_column_slice(&self.y));
        Ok(self.lml_from(&f, &alpha))
    }

    /// Log marginal likelihood and its gradient over every raw parameter,
    /// noise last.
    pub fn lml_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        if self.is_empty() {
            return Err(invalid("log marginal likelihood needs at least one observation"));
        }
        let n = self.len();
        let pass = forward_gram(&self.spec, &self.store, &self.x)?;
        let f = SpdFactor::new(&self.noisy_gram(pass.output()))?;
        let alpha = f.solve(&DVector::from_column_slice(&self.y));
        let lml = self.lml_from(&f, &alpha);

        let kinv = f.inverse();
        let mut abar = vec![0.0; n * n];
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                abar[i * n + j] = 0.5 * (alpha[i] * alpha[j] - kinv[(i, j)]);
            }
            trace += abar[i * n + i];
        }
        let mut adj = KernelValueMatrix::from_real(n, n, abar);
        adj.symmetric = true;
        let mut grad = backward(&self.spec, &self.store, &pass, &adj)?;
        let ni = self.store.noise_index();
        grad[ni] = trace * sigmoid(self.store.noise_raw());
        Ok((lml, grad))
    }

    /// Gradient of the log marginal likelihood.
    pub fn grad_log_marginal(&self) -> Result<Vec<f64>> {
        Ok(self.lml_and_grad()?.1)
    }

    /// Factorizes the training covariance once for repeated predictions.
    pub fn fit_posterior(&self) -> Result<FittedPosterior> {
        if self.is_empty() {
            return Ok(FittedPosterior { factor: None, alpha: DVector::zeros(0) });
        }
        let k = kernel_gram(&self.spec, &self.store, &self.x)?;
        let f = SpdFactor::new(&self.noisy_gram(&k))?;
        let alpha = f.solve(&DVector::from_column_slice(&self.y));
        Ok(FittedPosterior { factor: Some(f), alpha })
    }

    /// Posterior predictive at raw inputs, in original target units.
    pub fn predict(&self, xs: &Points) -> Result<Posterior> {
        let fp = self.fit_posterior()?;
        self.predict_with(&fp, xs)
    }

    pub fn predict_with(&self, fp: &FittedPosterior, xs: &Points) -> Result<Posterior> {
        let s = self.predict_standardized(fp, &self.standardizer.transform_x(xs))?;
        let st = &self.standardizer;
        Ok(Posterior {
            mean: s.mean.iter().map(|m| st.inverse_y(*m)).collect(),
            variance: s.variance.iter().map(|v| v * st.y_scale * st.y_scale).collect(),
        })
    }

    /// Posterior predictive at already-standardized inputs, standardized units.
    pub fn predict_standardized(&self, fp: &FittedPosterior, xs: &Points) -> Result<Posterior> {
        if xs.dim() != self.spec.input_dim {
            return Err(invalid(format!(
                "test inputs have {} columns, kernel expects {}",
                xs.dim(),
                self.spec.input_dim
            )));
        }
        let s2 = self.noise_variance();
        let prior = kernel_diag(&self.spec, &self.store, xs)?;
        let Some(f) = fp.factor.as_ref() else {
            return Ok(Posterior { mean: vec![0.0; xs.len()], variance: prior.iter().map(|k| k + s2).collect() });
        };
        // kx is m x n; transpose to n x m for the triangular solve.
        let kx = kernel_matrix(&self.spec, &self.store, xs, &self.x)?.to_dmatrix();
        let mean = (&kx * &fp.alpha).iter().copied().collect();
        let v = f.solve_lower(&kx.transpose());
        let variance = (0..xs.len())
            .map(|j| {
                let q: f64 = v.column(j).iter().map(|a| a * a).sum();
                (prior[j] - q).max(0.0) + s2
            })
            .collect();
        Ok(Posterior { mean, variance })
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        let ck = Checkpoint {
            schema: MODEL_SCHEMA.into(),
            spec: self.spec.clone(),
            params: self.store.flat.clone(),
            noise_raw: self.store.noise_raw(),
            standardizer: self.standardizer.clone(),
            train_x: self.x.clone(),
            train_y: self.y.clone(),
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_checkpoint(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.schema != MODEL_SCHEMA {
            return Err(NknError::Parse(format!("unsupported model schema {:?}", ck.schema)));
        }
        ck.spec.validate()?;
        let mut store = ParameterStore::with_values(&ck.spec, ck.params)?;
        store.set_noise_raw(ck.noise_raw);
        if ck.train_x.len() != ck.train_y.len() || ck.train_x.dim() != ck.spec.input_dim {
            return Err(NknError::Parse("checkpoint training data is inconsistent".into()));
        }
        Ok(Self { spec: ck.spec, store, standardizer: ck.standardizer, x: ck.train_x, y: ck.train_y })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: String,
    spec: NetworkSpec,
    params: Vec<f64>,
    noise_raw: f64,
    standardizer: Standardizer,
    /// Standardized.
    train_x: Points,
    /// Standardized.
    train_y: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nkn::spec::PrimitiveSlot;
    use crate::primitives::{Hyper, PrimitiveKind, PrimitiveTag};

    fn const_model(c: f64, noise: f64, x: &[f64], y: &[f64]) -> GpModel {
        let kind = PrimitiveKind::new(PrimitiveTag::Const);
        let init = kind.encode(&Hyper::variance(c), 1).unwrap();
        let spec = NetworkSpec::new(1, vec![PrimitiveSlot { kind, init }], vec![]);
        let store = ParameterStore::from_spec(&spec, softplus_inv(noise)).unwrap();
        GpModel::with_standardizer(spec, store, &Points::from_scalars(x), y, Standardizer::identity(1)).unwrap()
    }

    #[test]
    fn standard_normal_marginals() {
        let m = const_model(0.5, 0.5, &[0.0], &[0.0]);
        assert!((m.log_marginal_likelihood().unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let m = const_model(0.5, 0.5, &[0.0], &[1.0]);
        assert!((m.log_marginal_likelihood().unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn noise_gradient_vanishes_at_one_point_optimum() {
        // 1-point stationarity: k + sigma^2 = y^2.
        let m = const_model(0.5, 1.5, &[0.0], &[2.0f64.sqrt()]);
        let g = m.grad_log_marginal().unwrap();
        assert!(g.last().unwrap().abs() < 1e-8);
    }

    #[test]
    fn prior_mode_predicts_prior() {
        let m = const_model(0.7, 0.2, &[], &[]);
        let p = m.predict(&Points::from_scalars(&[1.0, 3.0])).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert!(p.variance.iter().all(|v| (v - 0.9).abs() < 1e-12));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let x = Points::from_scalars(&[0.0, 1.0, 2.5]);
        let y = [1.0, 3.0, 2.0];
        let m = GpModel::from_preset(&Preset::Rbf, &x, &y, 3, false).unwrap();
        let back = GpModel::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        let xs = Points::from_scalars(&[0.7, 4.0]);
        assert_eq!(m.predict(&xs).unwrap(), back.predict(&xs).unwrap());
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let x = Points::from_scalars(&[0.0, 1.0]);
        assert!(GpModel::from_preset(&Preset::Rbf, &x, &[1.0], 0, false).is_err());
    }
}
