//! Texture extrapolation on pixel grids and PGM image I/O.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, NknError, Result};
use crate::nkn::{LayerSpec, LinearSpec, NetworkSpec, NodeRef, PrimitiveSlot};
use crate::primitives::{softplus_inv, Hyper, PrimitiveKind, PrimitiveTag, LENGTHSCALE_FLOOR};
use crate::structured::grid::{GridGp, GridSpec};
use crate::structured::kron::{kron_matvec, pcg_solve, CgConfig};
use crate::train::{adam_step, clip_global_norm, AdamState, TrainConfig};

/// Grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(invalid(format!("image of {rows}x{cols} needs {} pixels, got {}", rows * cols, pixels.len())));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }
}

/// Parses binary (P5) or ASCII (P2) PGM data.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(NknError::Parse("PGM header truncated".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| NknError::Parse(format!("PGM {what} is not an integer: {s:?}")))
    };
    let cols = num(token()?, "width")?;
    let rows = num(token()?, "height")?;
    let maxval = num(token()?, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(NknError::Parse(format!("PGM maxval {maxval} outside 1..=65535")));
    }
    let n = rows * cols;
    let scale = maxval as f64;
    let pixels = match magic.as_str() {
        "P2" => {
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let t = token().map_err(|_| NknError::Parse(format!("PGM has {i} of {n} pixels")))?;
                v.push(num(t, "pixel")?.min(maxval) as f64 / scale);
            }
            v
        }
        "P5" => {
            let data = &bytes[(pos + 1).min(bytes.len())..];
            let width = if maxval < 256 { 1 } else { 2 };
            if data.len() < n * width {
                return Err(NknError::Parse(format!("PGM raster has {} bytes, expected {}", data.len(), n * width)));
            }
            (0..n)
                .map(|i| {
                    let v = if width == 1 {
                        data[i] as usize
                    } else {
                        ((data[2 * i] as usize) << 8) | data[2 * i + 1] as usize
                    };
                    v.min(maxval) as f64 / scale
                })
                .collect()
        }
        m => return Err(NknError::Parse(format!("unsupported image format {m:?}; expected P2 or P5"))),
    };
    GrayImage::new(rows, cols, pixels)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    parse_pgm(&std::fs::read(path)?)
}

/// Writes an 8-bit binary PGM, clamping to `[0, 1]`.
pub fn write_pgm<W: Write>(mut w: W, img: &GrayImage) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.cols, img.rows)?;
    let raster: Vec<u8> = img.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_all(&raster)?;
    Ok(())
}

/// Held-out mask with a `h x w` rectangle centered in the image.
pub fn center_hole(rows: usize, cols: usize, h: usize, w: usize) -> Vec<bool> {
    let (r0, c0) = (rows.saturating_sub(h) / 2, cols.saturating_sub(w) / 2);
    (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            r >= r0 && r < r0 + h && c >= c0 && c < c0 + w
        })
        .collect()
}

/// Noisy and clean versions of a synthetic texture.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTexture {
    pub image: GrayImage,
    pub clean: GrayImage,
}

/// `0.5 + 0.2 sin(2 pi r / p_r + a) sin(2 pi c / p_c + b)` plus `N(0, noise^2)`,
/// with periods drawn from `[8, 16]` pixels.
pub fn synthetic_texture(rows: usize, cols: usize, noise: f64, seed: u64) -> Result<SyntheticTexture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = Uniform::new(8.0, 16.0).map_err(|e| invalid(e.to_string()))?;
    let phase = Uniform::new(0.0, std::f64::consts::TAU).map_err(|e| invalid(e.to_string()))?;
    let (pr, pc) = (per.sample(&mut rng), per.sample(&mut rng));
    let (a, b) = (phase.sample(&mut rng), phase.sample(&mut rng));
    let eps = Normal::new(0.0, noise.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let mut clean = Vec::with_capacity(rows * cols);
    let mut noisy = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let f = 0.5 + 0.2 * (tau * r as f64 / pr + a).sin() * (tau * c as f64 / pc + b).sin();
            clean.push(f);
            noisy.push(f + eps.sample(&mut rng));
        }
    }
    Ok(SyntheticTexture { image: GrayImage::new(rows, cols, noisy)?, clean: GrayImage::new(rows, cols, clean)? })
}

/// Per-axis kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKernel {
    Rbf,
    Per,
    /// `LIN, RBF, RQ, PER` combined by a trainable nonnegative sum.
    Nkn,
}

impl fmt::Display for AxisKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rbf => "rbf",
            Self::Per => "per",
            Self::Nkn => "nkn",
        })
    }
}

impl FromStr for AxisKernel {
    type Err = NknError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rbf" => Ok(Self::Rbf),
            "per" => Ok(Self::Per),
            "nkn" => Ok(Self::Nkn),
            other => Err(invalid(format!("unknown axis kernel {other:?}; expected rbf, per or nkn"))),
        }
    }
}

impl AxisKernel {
    /// 1-D network for an axis of `span` pixels.
    pub fn axis_spec(self, span: f64) -> Result<NetworkSpec> {
        let slot = |tag: PrimitiveTag, h: Hyper| -> Result<PrimitiveSlot> {
            let kind = PrimitiveKind::new(tag);
            let init = kind.encode(&h, 1)?;
            Ok(PrimitiveSlot { kind, init })
        };
        let per = || slot(PrimitiveTag::Per, Hyper::per(1.0, 1.0, span / 4.0));
        let rbf = || slot(PrimitiveTag::Rbf, Hyper::rbf(1.0, span / 8.0));
        Ok(match self {
            Self::Rbf => NetworkSpec::new(1, vec![rbf()?], vec![]),
            Self::Per => NetworkSpec::new(1, vec![per()?], vec![]),
            Self::Nkn => {
                let prims = vec![
                    slot(PrimitiveTag::Lin, Hyper::variance(1.0 / (span * span)))?,
                    rbf()?,
                    slot(PrimitiveTag::Rq, Hyper::rbf(1.0, span / 16.0))?,
                    per()?,
                ];
                let init = vec![softplus_inv(0.25); 4];
                let layer = LayerSpec::Linear(LinearSpec { out: 1, bias: false, edges: None, init });
                NetworkSpec::new(1, prims, vec![layer])
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureConfig {
    pub axis_kernel: AxisKernel,
    /// Adam iterations after the period scan.
    pub iters: usize,
    pub lr: f64,
    /// Central-difference step relative to `max(1, |theta|)`.
    pub fd_step: f64,
    /// Candidate periods per axis in the initial scan (0 disables it).
    pub period_candidates: usize,
    pub cg: CgConfig,
    /// Held-out pixels receive exact variances when there are at most this many.
    pub exact_variance_limit: usize,
    pub noise_variance: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            axis_kernel: AxisKernel::Per,
            iters: 30,
            lr: 0.05,
            fd_step: 1e-4,
            period_candidates: 24,
            cg: CgConfig { tol: 1e-8, max_iters: 5000, ..CgConfig::default() },
            exact_variance_limit: 1024,
            noise_variance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureResult {
    pub rows: usize,
    pub cols: usize,
    /// Predictive mean in image units.
    pub mean: Vec<f64>,
    /// Predictive standard deviation in image units.
    pub std: Vec<f64>,
    /// `true` where the pixel was used for training.
    pub observed: Vec<bool>,
    pub heldout_rmse: f64,
    /// Standard deviation of the held-out truth.
    pub heldout_std: f64,
    pub final_objective: f64,
    pub noise_variance: f64,
}

impl TextureResult {
    pub fn mean_image(&self) -> GrayImage {
        GrayImage { rows: self.rows, cols: self.cols, pixels: self.mean.clone() }
    }

    /// Columns `row, col, mean, std, truth, observed_flag`.
    pub fn write_csv<W: Write>(&self, w: W, truth: &GrayImage) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let e = |e: csv::Error| NknError::Parse(e.to_string());
        wr.write_record(["row", "col", "mean", "std", "truth", "observed_flag"]).map_err(e)?;
        for i in 0..self.rows * self.cols {
            wr.write_record([
                (i / self.cols).to_string(),
                (i % self.cols).to_string(),
                format!("{:?}", self.mean[i]),
                format!("{:?}", self.std[i]),
                format!("{:?}", truth.pixels[i]),
                u8::from(self.observed[i]).to_string(),
            ])
            .map_err(e)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Fits a product-kernel GP to the pixels outside `heldout` and predicts the
/// whole image.
pub fn texture_extrapolate(img: &GrayImage, heldout: &[bool], cfg: &TextureConfig) -> Result<TextureResult> {
    if heldout.len() != img.pixels.len() {
        return Err(invalid(format!("mask has {} entries, image has {}", heldout.len(), img.pixels.len())));
    }
    if !(cfg.fd_step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let observed: Vec<bool> = heldout.iter().map(|h| !h).collect();
    let obs_vals: Vec<f64> = img.pixels.iter().zip(&observed).filter(|(_, o)| **o).map(|(v, _)| *v).collect();
    if obs_vals.len() < 2 {
        return Err(invalid("need at least two observed pixels"));
    }
    let mu = obs_vals.iter().sum::<f64>() / obs_vals.len() as f64;
    let sd = (obs_vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / obs_vals.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let y: Vec<f64> = obs_vals.iter().map(|v| (v - mu) / sd).collect();

    let axes = vec![
        (0..img.rows).map(|i| i as f64).collect::<Vec<_>>(),
        (0..img.cols).map(|i| i as f64).collect::<Vec<_>>(),
    ];
    let specs = vec![cfg.axis_kernel.axis_spec(img.rows as f64)?, cfg.axis_kernel.axis_spec(img.cols as f64)?];
    let grid = GridSpec::new(axes, observed.clone(), specs)?;
    let mut gp = GridGp::new(grid, cfg.noise_variance)?;

    period_scan(&mut gp, &y, cfg)?;

    let tcfg = TrainConfig { iters: cfg.iters.max(1), lr: cfg.lr, ..TrainConfig::default() };
    let mut params = gp.params();
    let mut state = AdamState::new(params.len());
    let mut warm: Option<Vec<f64>> = None;
    for it in 0..cfg.iters {
        let mut grad = vec![0.0; params.len()];
        for k in 0..params.len() {
            let h = cfg.fd_step * params[k].abs().max(1.0);
            let mut p = params.clone();
            p[k] = params[k] + h;
            gp.set_params(&p)?;
            let (up, _) = gp.approx_lml(&y, &cfg.cg, warm.as_deref())?;
            p[k] = params[k] - h;
            gp.set_params(&p)?;
            let (dn, _) = gp.approx_lml(&y, &cfg.cg, warm.as_deref())?;
            grad[k] = (up - dn) / (2.0 * h);
        }
        clip_global_norm(&mut grad, tcfg.clip_norm);
        adam_step(&mut params, &mut state, &grad, &tcfg)
            .map_err(|e| numeric(format!("texture iteration {it}: {e}")))?;
        gp.set_params(&params)?;
        let (_, alpha) = gp.approx_lml(&y, &cfg.cg, warm.as_deref())?;
        warm = Some(alpha);
    }

    let (objective, alpha) = gp.approx_lml(&y, &cfg.cg, warm.as_deref())?;
    let grams = gp.axis_grams()?;
    let s2 = gp.noise_variance();
    let f = kron_matvec(&grams, &alpha)?;
    let mut var = approx_variance(&grams, s2)?;
    let held: Vec<usize> = (0..heldout.len()).filter(|&i| heldout[i]).collect();
    if !held.is_empty() && held.len() <= cfg.exact_variance_limit {
        let noise: Vec<f64> = observed.iter().map(|&o| if o { s2 } else { 1.0 / cfg.cg.epsilon }).collect();
        let mut warm_v: Option<Vec<f64>> = None;
        for &i in &held {
            let k = kron_column(&grams, i, img.cols);
            let sol = pcg_solve(&grams, &noise, &k, warm_v.as_deref(), &cfg.cg)?;
            let q: f64 = k.iter().zip(&sol.x).map(|(a, b)| a * b).sum();
            var[i] = (k[i] - q).max(0.0) + s2;
            warm_v = Some(sol.x);
        }
    }
    let mean: Vec<f64> = f.iter().map(|v| mu + sd * v).collect();
    let std: Vec<f64> = var.iter().map(|v| sd * v.max(0.0).sqrt()).collect();
    let (rmse, hstd) = if held.is_empty() {
        (0.0, 0.0)
    } else {
        let n = held.len() as f64;
        let rmse = (held.iter().map(|&i| (mean[i] - img.pixels[i]).powi(2)).sum::<f64>() / n).sqrt();
        let tm = held.iter().map(|&i| img.pixels[i]).sum::<f64>() / n;
        let ts = (held.iter().map(|&i| (img.pixels[i] - tm).powi(2)).sum::<f64>() / n).sqrt();
        (rmse, ts)
    };
    Ok(TextureResult {
        rows: img.rows,
        cols: img.cols,
        mean,
        std,
        observed,
        heldout_rmse: rmse,
        heldout_std: hstd,
        final_objective: objective,
        noise_variance: s2 * sd * sd,
    })
}

/// Chooses each axis's PER periods (or, on RBF-only axes, the RBF
/// lengthscale) by a log-spaced scan of the objective.
fn period_scan(gp: &mut GridGp, y: &[f64], cfg: &TextureConfig) -> Result<()> {
    let k = cfg.period_candidates;
    if k == 0 {
        return Ok(());
    }
    for axis in 0..gp.grid.axes.len() {
        let span = gp.grid.axes[axis].len() as f64;
        let (lo, hi) = (2.0f64, (span / 2.0).max(2.5));
        let prims = &gp.grid.axis_specs[axis].primitives;
        let mut targets: Vec<(usize, usize)> = prims
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind.tag == PrimitiveTag::Per)
            .map(|(i, _)| (i, 2))
            .collect();
        if prims.len() == 1 && prims[0].kind.tag == PrimitiveTag::Rbf {
            targets.push((0, 1));
        }
        for (slot, idx) in targets {
            let mut best: Option<(f64, f64)> = None;
            for c in 0..k {
                let v = lo * (hi / lo).powf(c as f64 / (k.max(2) - 1) as f64);
                set_scale(gp, axis, slot, idx, v);
                let lml = match gp.approx_lml(y, &cfg.cg, None) {
                    Ok((v, _)) => v,
                    Err(NknError::Numeric(_)) => continue,
                    Err(e) => return Err(e),
                };
                if best.is_none_or(|(b, _)| lml > b) {
                    best = Some((lml, v));
                }
            }
            let (_, v) = best.ok_or_else(|| numeric(format!("initial scan failed on axis {axis}")))?;
            set_scale(gp, axis, slot, idx, v);
        }
    }
    Ok(())
}

/// Sets raw entry `idx` of a 1-D primitive (lengthscale 1, PER period 2).
fn set_scale(gp: &mut GridGp, axis: usize, slot: usize, idx: usize, value: f64) {
    gp.store_mut(axis).slice_mut(NodeRef::Primitive(slot))[idx] = softplus_inv(value - LENGTHSCALE_FLOOR);
}

/// Column `i` of `K_rows kron K_cols`.
fn kron_column(grams: &[DMatrix<f64>], i: usize, cols: usize) -> Vec<f64> {
    let (r, c) = (i / cols, i % cols);
    let a = grams[0].column(r);
    let b = grams[1].column(c);
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a.iter() {
        out.extend(b.iter().map(|y| x * y));
    }
    out
}

/// Predictive variance on a fully observed grid,
/// `diag(Q f(Lambda) Q^T) + sigma2` with `f(l) = l sigma2 / (l + sigma2)`,
/// evaluated as a Kronecker product of squared eigenvector matrices.
fn approx_variance(grams: &[DMatrix<f64>], s2: f64) -> Result<Vec<f64>> {
    let mut sq = Vec::new();
    let mut eig = Vec::new();
    for g in grams {
        let e = SymmetricEigen::try_new(g.clone(), 1e-14, 10_000)
            .ok_or_else(|| numeric("axis eigen-decomposition did not converge"))?;
        sq.push(e.eigenvectors.map(|v| v * v));
        eig.push(e.eigenvalues.iter().copied().collect::<Vec<_>>());
    }
    let lam = crate::structured::kron::kron_eigenvalues(&eig);
    let f: Vec<f64> = lam.iter().map(|l| l.max(0.0) * s2 / (l.max(0.0) + s2)).collect();
    let d = kron_matvec(&sq, &f)?;
    Ok(d.into_iter().map(|v| v.max(0.0) + s2).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_pgm_agree() {
        let a = parse_pgm(b"P2\n# c\n3 2\n255\n0 51 102\n153 204 255\n").unwrap();
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend([0u8, 51, 102, 153, 204, 255]);
        let b = parse_pgm(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.rows, a.cols), (2, 3));
        assert!((a.get(1, 0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pgm_write_then_parse() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 0.2, 0.6]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        let back = parse_pgm(&buf).unwrap();
        assert!(back.pixels.iter().zip(&img.pixels).all(|(a, b)| (a - b).abs() < 0.5 / 255.0 + 1e-12));
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00\x01").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
    }

    #[test]
    fn hole_is_centered() {
        let m = center_hole(6, 6, 2, 2);
        assert_eq!(m.iter().filter(|h| **h).count(), 4);
        assert!(m[2 * 6 + 2] && m[3 * 6 + 3] && !m[0]);
    }

    #[test]
    fn axis_kernel_names() {
        for k in [AxisKernel::Rbf, AxisKernel::Per, AxisKernel::Nkn] {
            assert_eq!(k.to_string().parse::<AxisKernel>().unwrap(), k);
            k.axis_spec(32.0).unwrap().validate().unwrap();
        }
    }
}
