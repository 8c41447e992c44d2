//! Primitive kernel families and their derivatives with respect to the
//! unconstrained ("raw") hyperparameters.
//!
//! Positive hyperparameters live on the real line and are mapped through
//! `softplus(r) = ln(1 + e^r)`. Lengthscales and periods get an extra
//! `1e-8` floor so a collapsed raw value never divides by zero.
//!
//! Raw parameter layout per family (`L` = number of lengthscales, equal to the
//! number of active dimensions in ARD mode and 1 otherwise, `D` = number of
//! active dimensions):
//!
//! | family | layout                     |
//! |--------|----------------------------|
//! | RBF    | `[s, l; L]`                |
//! | PER    | `[s, l; L, p; L]`          |
//! | LIN    | `[s]`                      |
//! | RQ     | `[s, l; L]` (alpha fixed)  |
//! | WN     | `[s]`                      |
//! | CONST  | `[s]`                      |
//! | COS    | `[s, mu; D]`               |
//! | CEXP   | `[mu; D]`                  |

use std::borrow::Cow;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::matrix::KernelValueMatrix;
use crate::points::Points;

/// Added to every softplus-constrained lengthscale or period.
pub const LENGTHSCALE_FLOOR: f64 = 1e-8;

#[inline]
pub fn softplus(r: f64) -> f64 {
    r.max(0.0) + (-r.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`]; `v` must be positive. Among the few raw values
/// nearest the analytic inverse, returns the one whose softplus is closest
/// to `v` (exact when representable).
pub fn softplus_inv(v: f64) -> f64 {
    let r = if v > 30.0 { v + (-(-v).exp()).ln_1p() } else { v.exp_m1().ln() };
    if !r.is_finite() {
        return r;
    }
    let err = |c: f64| (softplus(c) - v).abs();
    let (mut best, mut best_err) = (r, err(r));
    for step in [f64::next_up as fn(f64) -> f64, f64::next_down] {
        let mut c = r;
        for _ in 0..8 {
            if best_err == 0.0 {
                return best;
            }
            c = step(c);
            let e = err(c);
            if e < best_err {
                (best, best_err) = (c, e);
            }
        }
    }
    best
}

#[inline]
pub fn sigmoid(r: f64) -> f64 {
    if r >= 0.0 {
        1.0 / (1.0 + (-r).exp())
    } else {
        let e = r.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PrimitiveTag {
    Rbf,
    Per,
    Lin,
    Rq,
    Wn,
    Const,
    Cos,
    Cexp,
}

impl PrimitiveTag {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rbf => "RBF",
            Self::Per => "PER",
            Self::Lin => "LIN",
            Self::Rq => "RQ",
            Self::Wn => "WN",
            Self::Const => "CONST",
            Self::Cos => "COS",
            Self::Cexp => "CEXP",
        }
    }

    pub fn is_stationary(self) -> bool {
        !matches!(self, Self::Lin)
    }
}

/// Input dimensions a primitive looks at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dims {
    All,
    Subset(Vec<usize>),
}

fn default_true() -> bool {
    true
}

fn default_alpha() -> f64 {
    1.0
}

fn is_default_alpha(a: &f64) -> bool {
    *a == 1.0
}

/// A primitive kernel family restricted to some input dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveKind {
    pub tag: PrimitiveTag,
    pub dims: Dims,
    /// Per-dimension lengthscales (and periods for PER). `false` shares one.
    #[serde(default = "default_true")]
    pub ard: bool,
    /// Fixed RQ shape parameter.
    #[serde(default = "default_alpha", skip_serializing_if = "is_default_alpha")]
    pub rq_alpha: f64,
}

impl PrimitiveKind {
    pub fn new(tag: PrimitiveTag) -> Self {
        Self { tag, dims: Dims::All, ard: true, rq_alpha: 1.0 }
    }

    pub fn on_dims(mut self, dims: Vec<usize>) -> Self {
        self.dims = Dims::Subset(dims);
        self
    }

    pub fn shared_lengthscale(mut self) -> Self {
        self.ard = false;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.rq_alpha = alpha;
        self
    }

    /// Number of active dimensions for data of dimensionality `d`.
    pub fn active_dims(&self, d: usize) -> usize {
        match &self.dims {
            Dims::All => d,
            Dims::Subset(v) => v.len(),
        }
    }

    fn n_lengthscales(&self, d: usize) -> usize {
        if self.ard {
            self.active_dims(d)
        } else {
            1
        }
    }

    /// Length of the raw parameter vector for `d`-dimensional inputs.
    pub fn param_count(&self, d: usize) -> usize {
        let nl = self.n_lengthscales(d);
        match self.tag {
            PrimitiveTag::Rbf | PrimitiveTag::Rq => 1 + nl,
            PrimitiveTag::Per => 1 + 2 * nl,
            PrimitiveTag::Lin | PrimitiveTag::Wn | PrimitiveTag::Const => 1,
            PrimitiveTag::Cos => 1 + self.active_dims(d),
            PrimitiveTag::Cexp => self.active_dims(d),
        }
    }

    pub fn is_complex(&self) -> bool {
        self.tag == PrimitiveTag::Cexp
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match &self.dims {
            Dims::All => {
                if d == 0 {
                    return Err(invalid("zero-dimensional inputs"));
                }
            }
            Dims::Subset(v) => {
                if v.is_empty() {
                    return Err(invalid(format!("{} has an empty dimension list", self.tag.name())));
                }
                if let Some(&bad) = v.iter().find(|&&i| i >= d) {
                    return Err(invalid(format!(
                        "{} uses dimension {bad} but inputs have {d}",
                        self.tag.name()
                    )));
                }
            }
        }
        if self.tag == PrimitiveTag::Rq && !(self.rq_alpha > 0.0 && self.rq_alpha.is_finite()) {
            return Err(invalid("RQ alpha must be positive"));
        }
        Ok(())
    }

    /// Raw vector realizing the given constrained hyperparameters.
    pub fn encode(&self, h: &Hyper, d: usize) -> Result<Vec<f64>> {
        self.validate(d)?;
        let nl = self.n_lengthscales(d);
        let nd = self.active_dims(d);
        let pos = |v: f64, what: &str| -> Result<f64> {
            if v > 0.0 && v.is_finite() {
                Ok(softplus_inv(v))
            } else {
                Err(invalid(format!("{what} must be positive, got {v}")))
            }
        };
        let floored = |v: f64, what: &str| -> Result<f64> {
            if v > LENGTHSCALE_FLOOR && v.is_finite() {
                Ok(softplus_inv(v - LENGTHSCALE_FLOOR))
            } else {
                Err(invalid(format!("{what} must exceed the floor, got {v}")))
            }
        };
        let expand = |v: &[f64], n: usize, what: &str| -> Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; n]),
                k if k == n => Ok(v.to_vec()),
                k => Err(invalid(format!("{what}: got {k} values, expected 1 or {n}"))),
            }
        };
        let mut raw = Vec::with_capacity(self.param_count(d));
        match self.tag {
            PrimitiveTag::Rbf | PrimitiveTag::Rq => {
                raw.push(pos(h.variance, "variance")?);
                for l in expand(&h.lengthscales, nl, "lengthscales")? {
                    raw.push(floored(l, "lengthscale")?);
                }
            }
            PrimitiveTag::Per => {
                raw.push(pos(h.variance, "variance")?);
                for l in expand(&h.lengthscales, nl, "lengthscales")? {
                    raw.push(floored(l, "lengthscale")?);
                }
                for p in expand(&h.periods, nl, "periods")? {
                    raw.push(floored(p, "period")?);
                }
            }
            PrimitiveTag::Lin | PrimitiveTag::Wn | PrimitiveTag::Const => {
                raw.push(pos(h.variance, "variance")?);
            }
            PrimitiveTag::Cos => {
                raw.push(pos(h.variance, "variance")?);
                raw.extend(expand(&h.frequencies, nd, "frequencies")?);
            }
            PrimitiveTag::Cexp => raw.extend(expand(&h.frequencies, nd, "frequencies")?),
        }
        Ok(raw)
    }

    /// Constrained view of a raw vector.
    pub fn decode(&self, raw: &[f64], d: usize) -> Result<Hyper> {
        let p = Prepared::new(self, raw, d)?;
        Ok(Hyper {
            variance: p.s,
            lengthscales: p.ls.clone(),
            periods: p.ps.clone(),
            frequencies: p.mu.clone(),
        })
    }
}

/// Constrained hyperparameters. Unused fields are ignored by a family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub periods: Vec<f64>,
    pub frequencies: Vec<f64>,
}

impl Hyper {
    pub fn variance(v: f64) -> Self {
        Self { variance: v, ..Default::default() }
    }

    pub fn rbf(v: f64, l: f64) -> Self {
        Self { variance: v, lengthscales: vec![l], ..Default::default() }
    }

    pub fn per(v: f64, l: f64, p: f64) -> Self {
        Self { variance: v, lengthscales: vec![l], periods: vec![p], ..Default::default() }
    }

    pub fn frequencies(v: f64, mu: Vec<f64>) -> Self {
        Self { variance: v, frequencies: mu, ..Default::default() }
    }
}

/// Constrained values and chain factors for one evaluation.
struct Prepared<'a> {
    kind: &'a PrimitiveKind,
    s: f64,
    s_sig: f64,
    ls: Vec<f64>,
    ls_sig: Vec<f64>,
    ps: Vec<f64>,
    ps_sig: Vec<f64>,
    mu: Vec<f64>,
    inv_ls: Vec<f64>,
    /// `sigmoid(raw_l) / l^3`, the lengthscale chain factor.
    ls_coef: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(kind: &'a PrimitiveKind, raw: &[f64], d: usize) -> Result<Self> {
        kind.validate(d)?;
        let expected = kind.param_count(d);
        if raw.len() != expected {
            return Err(invalid(format!(
                "{} expects {expected} raw parameters, got {}",
                kind.tag.name(),
                raw.len()
            )));
        }
        let nl = kind.n_lengthscales(d);
        let floored = |r: &[f64]| -> (Vec<f64>, Vec<f64>) {
            (
                r.iter().map(|&v| softplus(v) + LENGTHSCALE_FLOOR).collect(),
                r.iter().map(|&v| sigmoid(v)).collect(),
            )
        };
        let mut p = Prepared {
            kind,
            s: 1.0,
            s_sig: 0.0,
            ls: Vec::new(),
            ls_sig: Vec::new(),
            ps: Vec::new(),
            ps_sig: Vec::new(),
            mu: Vec::new(),
            inv_ls: Vec::new(),
            ls_coef: Vec::new(),
        };
        let tag = kind.tag;
        if tag != PrimitiveTag::Cexp {
            p.s = softplus(raw[0]);
            p.s_sig = sigmoid(raw[0]);
        }
        match tag {
            PrimitiveTag::Rbf | PrimitiveTag::Rq => {
                (p.ls, p.ls_sig) = floored(&raw[1..1 + nl]);
                p.inv_ls = p.ls.iter().map(|l| 1.0 / l).collect();
                p.ls_coef = p.ls.iter().zip(&p.ls_sig).map(|(l, g)| g / (l * l * l)).collect();
            }
            PrimitiveTag::Per => {
                (p.ls, p.ls_sig) = floored(&raw[1..1 + nl]);
                (p.ps, p.ps_sig) = floored(&raw[1 + nl..1 + 2 * nl]);
            }
            PrimitiveTag::Cos => p.mu = raw[1..].to_vec(),
            PrimitiveTag::Cexp => p.mu = raw.to_vec(),
            _ => {}
        }
        Ok(p)
    }

    /// `sum_i (tau_i / l_i)^2`, with a shared lengthscale when not ARD.
    #[inline]
    fn scaled_sq(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.kind.ard {
            x.iter()
                .zip(y)
                .zip(&self.inv_ls)
                .map(|((a, b), il)| {
                    let t = (a - b) * il;
                    t * t
                })
                .sum()
        } else {
            let l = self.ls[0];
            sq_dist(x, y) / (l * l)
        }
    }

    #[inline]
    fn value(&self, x: &[f64], y: &[f64]) -> Complex64 {
        let re = match self.kind.tag {
            PrimitiveTag::Rbf => self.s * (-0.5 * self.scaled_sq(x, y)).exp(),
            PrimitiveTag::Rq => {
                let a = self.kind.rq_alpha;
                self.s * rq_pow(1.0 + self.scaled_sq(x, y) / (2.0 * a), a)
            }
            PrimitiveTag::Per => self.s * (-self.per_exponent(x, y)).exp(),
            PrimitiveTag::Lin => self.s * dot(x, y),
            PrimitiveTag::Wn => {
                if x == y {
                    self.s
                } else {
                    0.0
                }
            }
            PrimitiveTag::Const => self.s,
            PrimitiveTag::Cos => self.s * self.phase(x, y).cos(),
            PrimitiveTag::Cexp => return Complex64::from_polar(1.0, self.phase(x, y)),
        };
        Complex64::new(re, 0.0)
    }

    #[inline]
    fn per_exponent(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.kind.ard {
            let mut acc = 0.0;
            for i in 0..x.len() {
                let sn = (PI * (x[i] - y[i]) / self.ps[i]).sin();
                acc += 2.0 * sn * sn / (self.ls[i] * self.ls[i]);
            }
            acc
        } else {
            let sn = (PI * sq_dist(x, y).sqrt() / self.ps[0]).sin();
            2.0 * sn * sn / (self.ls[0] * self.ls[0])
        }
    }

    #[inline]
    fn phase(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).zip(&self.mu).map(|((a, b), m)| m * (a - b)).sum()
    }

    /// Adds `Re(conj(g) * dk/draw_j)` to `out[j]` for every raw parameter.
    #[inline]
    fn accumulate_grad(&self, x: &[f64], y: &[f64], g: Complex64, out: &mut [f64]) {
        let nl = self.ls.len();
        match self.kind.tag {
            PrimitiveTag::Rbf => {
                let r2 = self.scaled_sq(x, y);
                let e = (-0.5 * r2).exp();
                let gk = g.re * self.s * e;
                out[0] += g.re * e * self.s_sig;
                if self.kind.ard {
                    for i in 0..nl {
                        let t = x[i] - y[i];
                        out[1 + i] += gk * t * t * self.ls_coef[i];
                    }
                } else {
                    out[1] += gk * r2 / self.ls[0] * self.ls_sig[0];
                }
            }
            PrimitiveTag::Rq => {
                let a = self.kind.rq_alpha;
                let r2 = self.scaled_sq(x, y);
                let q = 1.0 + r2 / (2.0 * a);
                let qa = rq_pow(q, a);
                out[0] += g.re * qa * self.s_sig;
                let gq = g.re * self.s * qa / q;
                if self.kind.ard {
                    for i in 0..nl {
                        let t = x[i] - y[i];
                        out[1 + i] += gq * t * t * self.ls_coef[i];
                    }
                } else {
                    out[1] += gq * r2 / self.ls[0] * self.ls_sig[0];
                }
            }
            PrimitiveTag::Per => {
                let e = (-self.per_exponent(x, y)).exp();
                out[0] += g.re * e * self.s_sig;
                let gk = g.re * self.s * e;
                if self.kind.ard {
                    for i in 0..nl {
                        let t = x[i] - y[i];
                        let (l, p) = (self.ls[i], self.ps[i]);
                        let u = PI * t / p;
                        let sn = u.sin();
                        out[1 + i] += gk * 4.0 * sn * sn / (l * l * l) * self.ls_sig[i];
                        out[1 + nl + i] +=
                            gk * 2.0 * PI * t * (2.0 * u).sin() / (p * p * l * l) * self.ps_sig[i];
                    }
                } else {
                    let t = sq_dist(x, y).sqrt();
                    let (l, p) = (self.ls[0], self.ps[0]);
                    let u = PI * t / p;
                    let sn = u.sin();
                    out[1] += gk * 4.0 * sn * sn / (l * l * l) * self.ls_sig[0];
                    out[2] += gk * 2.0 * PI * t * (2.0 * u).sin() / (p * p * l * l) * self.ps_sig[0];
                }
            }
            PrimitiveTag::Lin => out[0] += g.re * dot(x, y) * self.s_sig,
            PrimitiveTag::Wn => {
                if x == y {
                    out[0] += g.re * self.s_sig;
                }
            }
            PrimitiveTag::Const => out[0] += g.re * self.s_sig,
            PrimitiveTag::Cos => {
                let ph = self.phase(x, y);
                out[0] += g.re * ph.cos() * self.s_sig;
                let gs = -g.re * self.s * ph.sin();
                for i in 0..self.mu.len() {
                    out[1 + i] += gs * (x[i] - y[i]);
                }
            }
            PrimitiveTag::Cexp => {
                let ph = self.phase(x, y);
                let w = -g.re * ph.sin() + g.im * ph.cos();
                for i in 0..self.mu.len() {
                    out[i] += w * (x[i] - y[i]);
                }
            }
        }
    }
}

/// `q^(-alpha)`.
#[inline]
fn rq_pow(q: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        1.0 / q
    } else {
        q.powf(-alpha)
    }
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn project_slice<'b>(kind: &PrimitiveKind, x: &'b [f64]) -> Cow<'b, [f64]> {
    match &kind.dims {
        Dims::All => Cow::Borrowed(x),
        Dims::Subset(idx) => Cow::Owned(idx.iter().map(|&i| x[i]).collect()),
    }
}

fn project_points<'b>(kind: &PrimitiveKind, pts: &'b Points) -> Cow<'b, Points> {
    match &kind.dims {
        Dims::All => Cow::Borrowed(pts),
        Dims::Subset(idx) => Cow::Owned(pts.map_cols(idx)),
    }
}

impl Points {
    fn map_cols(&self, idx: &[usize]) -> Points {
        let mut data = Vec::with_capacity(self.len() * idx.len());
        for r in self.rows() {
            data.extend(idx.iter().map(|&i| r[i]));
        }
        Points::new(self.len(), idx.len(), data).expect("consistent projection")
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(invalid(format!(
            "input dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// `k(x, y)` for a single pair of inputs.
pub fn eval_primitive(kind: &PrimitiveKind, raw: &[f64], x: &[f64], y: &[f64]) -> Result<Complex64> {
    check_pair(x, y)?;
    let p = Prepared::new(kind, raw, x.len())?;
    Ok(p.value(&project_slice(kind, x), &project_slice(kind, y)))
}

/// Complex partials `dk/draw_j` for a single pair of inputs.
pub fn grad_primitive(
    kind: &PrimitiveKind,
    raw: &[f64],
    x: &[f64],
    y: &[f64],
) -> Result<Vec<Complex64>> {
    check_pair(x, y)?;
    let p = Prepared::new(kind, raw, x.len())?;
    let (xp, yp) = (project_slice(kind, x), project_slice(kind, y));
    let mut re = vec![0.0; raw.len()];
    let mut im = vec![0.0; raw.len()];
    // Re(conj(1) D) = Re D and Re(conj(i) D) = Im D.
    p.accumulate_grad(&xp, &yp, Complex64::new(1.0, 0.0), &mut re);
    p.accumulate_grad(&xp, &yp, Complex64::new(0.0, 1.0), &mut im);
    Ok(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect())
}

fn check_points(x: &Points, y: &Points) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(invalid(format!(
            "input dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Gram matrix `k(X, Y)`. With `symmetric`, `Y` must be `X` and only the
/// upper triangle is evaluated.
pub fn primitive_gram(
    kind: &PrimitiveKind,
    raw: &[f64],
    x: &Points,
    y: &Points,
    symmetric: bool,
) -> Result<KernelValueMatrix> {
    check_points(x, y)?;
    let p = Prepared::new(kind, raw, x.dim())?;
    let (xp, yp) = (project_points(kind, x), project_points(kind, y));
    let (n, m) = (x.len(), y.len());
    let mut out = KernelValueMatrix::zeros(n, m, kind.is_complex(), symmetric);
    if symmetric {
        for i in 0..n {
            let xi = xp.row(i);
            for j in i..n {
                let v = p.value(xi, xp.row(j));
                out.set(i, j, v);
                out.set(j, i, v.conj());
            }
        }
    } else {
        for i in 0..n {
            let xi = xp.row(i);
            for j in 0..m {
                out.set(i, j, p.value(xi, yp.row(j)));
            }
        }
    }
    Ok(out)
}

/// Paired evaluation `k(x_i, y_i)` as an `n x 1` matrix.
pub fn primitive_pairs(
    kind: &PrimitiveKind,
    raw: &[f64],
    x: &Points,
    y: &Points,
) -> Result<KernelValueMatrix> {
    check_points(x, y)?;
    if x.len() != y.len() {
        return Err(invalid("paired evaluation needs equal point counts"));
    }
    let p = Prepared::new(kind, raw, x.dim())?;
    let (xp, yp) = (project_points(kind, x), project_points(kind, y));
    let mut out = KernelValueMatrix::zeros(x.len(), 1, kind.is_complex(), false);
    for i in 0..x.len() {
        out.set(i, 0, p.value(xp.row(i), yp.row(i)));
    }
    Ok(out)
}

/// Accumulates `sum_ij Re(conj(G_ij) dK_ij/draw)` into `out` for a Gram
/// matrix built by [`primitive_gram`] with the same arguments.
pub fn primitive_gram_grad(
    kind: &PrimitiveKind,
    raw: &[f64],
    x: &Points,
    y: &Points,
    symmetric: bool,
    adjoint: &KernelValueMatrix,
    out: &mut [f64],
) -> Result<()> {
    check_points(x, y)?;
    let p = Prepared::new(kind, raw, x.dim())?;
    if out.len() != raw.len() {
        return Err(invalid("gradient buffer length mismatch"));
    }
    let (xp, yp) = (project_points(kind, x), project_points(kind, y));
    let (n, m) = (x.len(), y.len());
    if adjoint.rows() != n || adjoint.cols() != m {
        return Err(invalid("adjoint shape mismatch"));
    }
    let g_at = |i: usize, j: usize| -> Complex64 {
        if kind.is_complex() {
            adjoint.get(i, j)
        } else {
            Complex64::new(adjoint.re[i * m + j], 0.0)
        }
    };
    if symmetric {
        // k_ji = conj(k_ij); for a conjugate-symmetric adjoint both triangles
        // contribute equally, otherwise fold the lower triangle in explicitly.
        for i in 0..n {
            let xi = xp.row(i);
            p.accumulate_grad(xi, xi, g_at(i, i), out);
            for j in i + 1..n {
                let g = g_at(i, j) + g_at(j, i).conj();
                p.accumulate_grad(xi, xp.row(j), g, out);
            }
        }
    } else {
        for i in 0..n {
            let xi = xp.row(i);
            for j in 0..m {
                p.accumulate_grad(xi, yp.row(j), g_at(i, j), out);
            }
        }
    }
    Ok(())
}

/// Number of upper-triangle entries (`i <= j`) of an `n x n` matrix.
pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// `k(x_i, x_j)` for `i <= j`, row by row, as a `packed_len(n) x 1` matrix.
pub fn primitive_upper(kind: &PrimitiveKind, raw: &[f64], x: &Points) -> Result<KernelValueMatrix> {
    let p = Prepared::new(kind, raw, x.dim())?;
    let xp = project_points(kind, x);
    let n = x.len();
    let mut out = KernelValueMatrix::zeros(packed_len(n), 1, kind.is_complex(), false);
    let mut k = 0;
    for i in 0..n {
        let xi = xp.row(i);
        for j in i..n {
            let v = p.value(xi, xp.row(j));
            out.re[k] = v.re;
            if let Some(im) = out.im.as_mut() {
                im[k] = v.im;
            }
            k += 1;
        }
    }
    Ok(out)
}

/// Accumulates `sum_k Re(conj(G_k) dK_k/draw)` over the packed entries of
/// [`primitive_upper`].
pub fn primitive_upper_grad(
    kind: &PrimitiveKind,
    raw: &[f64],
    x: &Points,
    adjoint: &KernelValueMatrix,
    out: &mut [f64],
) -> Result<()> {
    let p = Prepared::new(kind, raw, x.dim())?;
    if out.len() != raw.len() {
        return Err(invalid("gradient buffer length mismatch"));
    }
    let n = x.len();
    if adjoint.len() != packed_len(n) {
        return Err(invalid("adjoint shape mismatch"));
    }
    let xp = project_points(kind, x);
    let mut k = 0;
    for i in 0..n {
        let xi = xp.row(i);
        for j in i..n {
            let g = match adjoint.im.as_ref() {
                Some(im) if kind.is_complex() => Complex64::new(adjoint.re[k], im[k]),
                _ => Complex64::new(adjoint.re[k], 0.0),
            };
            if g.re != 0.0 || g.im != 0.0 {
                p.accumulate_grad(xi, xp.row(j), g, out);
            }
            k += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(kind: &PrimitiveKind, h: Hyper, d: usize) -> Vec<f64> {
        kind.encode(&h, d).unwrap()
    }

    #[test]
    fn softplus_roundtrip() {
        for v in [1e-6, 0.3, 1.0, 7.5, 45.0] {
            assert!((softplus(softplus_inv(v)) - v).abs() < 1e-12 * v.max(1.0));
        }
        assert_eq!(softplus(softplus_inv(1.0)), 1.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn rbf_identity_and_unit_distance() {
        let k = PrimitiveKind::new(PrimitiveTag::Rbf);
        let r = raw(&k, Hyper::rbf(1.0, 1.0), 2);
        let v = eval_primitive(&k, &r, &[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert!((v.re - 1.0).abs() < 1e-12 && v.im == 0.0);
        let v = eval_primitive(&k, &r, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v.re - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn lin_hand_value() {
        let k = PrimitiveKind::new(PrimitiveTag::Lin);
        let r = raw(&k, Hyper::variance(2.0), 2);
        let v = eval_primitive(&k, &r, &[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((v.re - 22.0).abs() < 1e-12);
    }

    #[test]
    fn cexp_half_turn() {
        let k = PrimitiveKind::new(PrimitiveTag::Cexp);
        let r = raw(&k, Hyper::frequencies(1.0, vec![PI]), 1);
        let v = eval_primitive(&k, &r, &[1.0], &[0.0]).unwrap();
        assert!((v.re + 1.0).abs() < 1e-15 && v.im.abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let k = PrimitiveKind::new(PrimitiveTag::Rbf);
        let r = raw(&k, Hyper::rbf(1.0, 1.0), 2);
        assert!(matches!(
            eval_primitive(&k, &r, &[0.0, 1.0], &[0.0]),
            Err(crate::NknError::InvalidInput(_))
        ));
        let sub = PrimitiveKind::new(PrimitiveTag::Rbf).on_dims(vec![3]);
        assert!(eval_primitive(&sub, &[0.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn white_noise_has_no_offdiagonal_gradient() {
        let k = PrimitiveKind::new(PrimitiveTag::Wn);
        let g = grad_primitive(&k, &[0.4], &[0.0], &[1.0]).unwrap();
        assert!(g.iter().all(|c| *c == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn rbf_lengthscale_gradient_vanishes_on_diagonal() {
        let k = PrimitiveKind::new(PrimitiveTag::Rbf);
        let r = vec![0.1, -0.3, 0.8];
        let g = grad_primitive(&k, &r, &[0.5, 2.0], &[0.5, 2.0]).unwrap();
        assert!(g[1].norm() == 0.0 && g[2].norm() == 0.0);
        assert!(g[0].re > 0.0);
    }

    #[test]
    fn param_counts_follow_family_table() {
        let d = 5;
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Rbf).param_count(d), d + 1);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Rq).param_count(d), d + 1);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Lin).param_count(d), 1);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Cos).param_count(d), d + 1);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Per).param_count(d), 2 * d + 1);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Cexp).param_count(d), d);
        assert_eq!(PrimitiveKind::new(PrimitiveTag::Rbf).shared_lengthscale().param_count(d), 2);
    }

    #[test]
    fn decode_inverts_encode() {
        let k = PrimitiveKind::new(PrimitiveTag::Per);
        let h = Hyper {
            variance: 0.7,
            lengthscales: vec![0.5, 2.0],
            periods: vec![3.0, 1.5],
            frequencies: vec![],
        };
        let back = k.decode(&k.encode(&h, 2).unwrap(), 2).unwrap();
        for (a, b) in back.lengthscales.iter().zip(&h.lengthscales) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in back.periods.iter().zip(&h.periods) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_gram_matches_full_gram() {
        let k = PrimitiveKind::new(PrimitiveTag::Cexp);
        let x = Points::from_rows(&[[0.0, 1.0], [0.3, -0.2], [2.0, 0.5]]).unwrap();
        let r = vec![0.7, -1.3];
        let a = primitive_gram(&k, &r, &x, &x, true).unwrap();
        let b = primitive_gram(&k, &r, &x, &x, false).unwrap();
        for (u, v) in a.re.iter().zip(&b.re) {
            assert!((u - v).abs() < 1e-15);
        }
        for (u, v) in a.im.unwrap().iter().zip(b.im.as_ref().unwrap()) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}
