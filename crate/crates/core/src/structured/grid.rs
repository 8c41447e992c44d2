//! GP on a partially observed Cartesian grid with a product kernel across axes.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::nkn::{kernel_gram, NetworkSpec, ParameterStore};
use crate::points::Points;
use crate::primitives::{softplus, softplus_inv};
use crate::structured::kron::{kron_matvec, logdet_approx, solve_completed_grid, CgConfig};

/// Axis coordinates, observed mask (row-major, last axis fastest) and one
/// 1-D network per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub axes: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
    pub axis_specs: Vec<NetworkSpec>,
}

impl GridSpec {
    pub fn new(axes: Vec<Vec<f64>>, observed: Vec<bool>, axis_specs: Vec<NetworkSpec>) -> Result<Self> {
        if axes.is_empty() || axes.len() != axis_specs.len() {
            return Err(invalid("need one network per grid axis and at least one axis"));
        }
        for (d, a) in axes.iter().enumerate() {
            if a.is_empty() || a.windows(2).any(|w| !(w[1] > w[0])) || a.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("axis {d} coordinates must be finite and strictly increasing")));
            }
        }
        for (d, s) in axis_specs.iter().enumerate() {
            s.validate()?;
            if s.input_dim != 1 {
                return Err(invalid(format!("axis {d} network must have input_dim 1, got {}", s.input_dim)));
            }
        }
        let n: usize = axes.iter().map(Vec::len).product();
        if observed.len() != n {
            return Err(invalid(format!("mask has {} entries, grid has {n} sites", observed.len())));
        }
        if !observed.iter().any(|o| *o) {
            return Err(invalid("grid has no observed sites"));
        }
        Ok(Self { axes, observed, axis_specs })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn n_total(&self) -> usize {
        self.observed.len()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }
}

/// Trainable state of a grid GP: per-axis parameter stores plus noise.
#[derive(Debug, Clone)]
pub struct GridGp {
    pub grid: GridSpec,
    stores: Vec<ParameterStore>,
    noise_raw: f64,
}

impl GridGp {
    pub fn new(grid: GridSpec, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(invalid("noise variance must be positive"));
        }
        let stores = grid
            .axis_specs
            .iter()
            .map(|s| ParameterStore::from_spec(s, 0.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, stores, noise_raw: softplus_inv(noise_variance) })
    }

    pub fn noise_variance(&self) -> f64 {
        softplus(self.noise_raw)
    }

    /// Kernel parameters of every axis in order, then the noise raw value.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self
            .stores
            .iter()
            .flat_map(|s| s.flat[..s.noise_index()].iter().copied())
            .collect();
        p.push(self.noise_raw);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let need: usize = self.stores.iter().map(|s| s.noise_index()).sum::<usize>() + 1;
        if p.len() != need {
            return Err(invalid(format!("expected {need} grid parameters, got {}", p.len())));
        }
        let mut off = 0;
        for s in &mut self.stores {
            let k = s.noise_index();
            s.flat[..k].copy_from_slice(&p[off..off + k]);
            off += k;
        }
        self.noise_raw = p[off];
        Ok(())
    }

    pub fn store(&self, axis: usize) -> &ParameterStore {
        &self.stores[axis]
    }

    pub fn store_mut(&mut self, axis: usize) -> &mut ParameterStore {
        &mut self.stores[axis]
    }

    /// Gram matrix of every axis network on its coordinates.
    pub fn axis_grams(&self) -> Result<Vec<DMatrix<f64>>> {
        self.grid
            .axes
            .iter()
            .zip(&self.grid.axis_specs)
            .zip(&self.stores)
            .map(|((a, spec), store)| Ok(kernel_gram(spec, store, &Points::from_scalars(a))?.to_dmatrix()))
            .collect()
    }

    /// Approximate log marginal likelihood of the observed values
    /// `-1/2 y^T alpha - 1/2 logdet_approx - M/2 ln 2 pi` and the CG solution.
    pub fn approx_lml(&self, y_m: &[f64], cfg: &CgConfig, warm: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let grams = self.axis_grams()?;
        let s2 = self.noise_variance();
        let sol = solve_completed_grid(&grams, &self.grid.observed, y_m, s2, cfg, warm)?;
        let m = self.grid.n_observed();
        let quad: f64 = self
            .grid
            .observed
            .iter()
            .enumerate()
            .filter(|(_, o)| **o)
            .zip(y_m)
            .map(|((i, _), y)| y * sol.x[i])
            .sum();
        let ld = logdet_approx(&grams, m, s2)?;
        let lml = -0.5 * quad - 0.5 * ld - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok((lml, sol.x))
    }

    /// Latent posterior mean `K_N alpha` at every grid site.
    pub fn posterior_mean(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        kron_matvec(&self.axis_grams()?, alpha)
    }
}
