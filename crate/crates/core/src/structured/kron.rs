//! Kronecker algebra and conjugate gradients on completed grids.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    /// Stop when `||y - (K + D) alpha|| <= tol * ||y||`.
    pub tol: f64,
    pub max_iters: usize,
    /// Precision of the imaginary observations at missing sites.
    pub epsilon: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 1000, epsilon: 1e-6 }
    }
}

/// `(K_1 kron ... kron K_D) v` for row-major `v` (last axis fastest).
pub fn kron_matvec(grams: &[DMatrix<f64>], v: &[f64]) -> Result<Vec<f64>> {
    let sizes: Vec<usize> = grams.iter().map(|g| g.nrows()).collect();
    if grams.iter().any(|g| !g.is_square()) {
        return Err(invalid("Kronecker factors must be square"));
    }
    let n: usize = sizes.iter().product();
    if n != v.len() {
        return Err(invalid(format!("vector has {} entries, Kronecker product has {n}", v.len())));
    }
    let mut cur = v.to_vec();
    let mut next = vec![0.0; n];
    for (d, g) in grams.iter().enumerate() {
        let nd = sizes[d];
        let stride: usize = sizes[d + 1..].iter().product();
        if stride == 1 {
            // Column-major nd x (n / nd) matrix whose columns are the axis fibres.
            let b = DMatrixView::from_slice(&cur, nd, n / nd);
            let mut out = DMatrixViewMut::from_slice(&mut next, nd, n / nd);
            out.gemm(1.0, g, &b, 0.0);
        } else {
            // Each outer block is an nd x stride row-major slab, i.e. a
            // column-major stride x nd matrix B; the axis product is B K_d^T.
            let gt = g.transpose();
            let block = nd * stride;
            for (src, dst) in cur.chunks(block).zip(next.chunks_mut(block)) {
                let b = DMatrixView::from_slice(src, stride, nd);
                let mut out = DMatrixViewMut::from_slice(dst, stride, nd);
                out.gemm(1.0, &b, &gt, 0.0);
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Dense `K_1 kron ... kron K_D`, for tests and small grids.
pub fn kron_dense(grams: &[DMatrix<f64>]) -> DMatrix<f64> {
    grams.iter().fold(DMatrix::from_element(1, 1, 1.0), |acc, g| acc.kronecker(g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iters: usize,
    /// `||b - A x|| / ||b||` recomputed from a fresh matvec.
    pub rel_residual: f64,
}

/// Solves `(K + diag(noise)) x = b` by conjugate gradients preconditioned with
/// `diag(noise)^{-1}`, which is CG on `C^T (K + D) C` with `C = D^{-1/2}`.
pub fn pcg_solve(
    grams: &[DMatrix<f64>],
    noise: &[f64],
    b: &[f64],
    x0: Option<&[f64]>,
    cfg: &CgConfig,
) -> Result<CgSolution> {
    let n = b.len();
    if noise.len() != n || noise.iter().any(|d| !(*d > 0.0)) {
        return Err(invalid("noise diagonal must be positive and match the grid size"));
    }
    if !(cfg.tol > 0.0) {
        return Err(invalid("CG tolerance must be positive"));
    }
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let mut y = kron_matvec(grams, x)?;
        y.iter_mut().zip(noise).zip(x).for_each(|((yi, d), xi)| *yi += d * xi);
        Ok(y)
    };
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(CgSolution { x: vec![0.0; n], iters: 0, rel_residual: 0.0 });
    }
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        _ => vec![0.0; n],
    };
    let ax = apply(&x)?;
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(noise).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iters = 0;
    while norm(&r) > cfg.tol * bnorm {
        if iters >= cfg.max_iters {
            return Err(numeric(format!(
                "conjugate gradients did not converge in {} iterations (relative residual {:.3e})",
                cfg.max_iters,
                norm(&r) / bnorm
            )));
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(numeric(format!("CG breakdown: p^T A p = {pap:e} at iteration {iters}")));
        }
        let a = rz / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / noise[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iters += 1;
    }
    let ax = apply(&x)?;
    let rel = norm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>()) / bnorm;
    Ok(CgSolution { x, iters, rel_residual: rel })
}

/// Targets and noise of the completed grid: observed sites carry `y` and
/// `sigma2`, missing sites carry 0 and `1 / epsilon`.
pub fn complete_grid(observed: &[bool], y_m: &[f64], sigma2: f64, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = observed.iter().filter(|o| **o).count();
    if m != y_m.len() {
        return Err(invalid(format!("{} observed sites but {} observations", m, y_m.len())));
    }
    if m == 0 {
        return Err(invalid("grid has no observed sites"));
    }
    let mut it = y_m.iter();
    let mut y = Vec::with_capacity(observed.len());
    let mut d = Vec::with_capacity(observed.len());
    for &o in observed {
        if o {
            y.push(*it.next().expect("counted"));
            d.push(sigma2);
        } else {
            y.push(0.0);
            d.push(1.0 / epsilon);
        }
    }
    Ok((y, d))
}

/// `alpha = (K_N + D_N)^{-1} y_N` on the completed grid.
pub fn solve_completed_grid(
    grams: &[DMatrix<f64>],
    observed: &[bool],
    y_m: &[f64],
    sigma2: f64,
    cfg: &CgConfig,
    warm: Option<&[f64]>,
) -> Result<CgSolution> {
    if y_m.iter().any(|v| !v.is_finite()) {
        return Err(invalid("observations must be finite"));
    }
    let (y, d) = complete_grid(observed, y_m, sigma2, cfg.epsilon)?;
    pcg_solve(grams, &d, &y, warm, cfg)
}

/// Eigenvalues of every axis factor.
pub fn axis_eigenvalues(grams: &[DMatrix<f64>]) -> Result<Vec<Vec<f64>>> {
    grams
        .iter()
        .map(|g| {
            let e = SymmetricEigen::try_new(g.clone(), 1e-14, 10_000)
                .ok_or_else(|| numeric("axis eigen-decomposition did not converge"))?;
            Ok(e.eigenvalues.iter().copied().collect())
        })
        .collect()
}

/// All `N` eigenvalues of the Kronecker product.
pub fn kron_eigenvalues(axis: &[Vec<f64>]) -> Vec<f64> {
    axis.iter().fold(vec![1.0], |acc, e| {
        let mut out = Vec::with_capacity(acc.len() * e.len());
        for a in &acc {
            out.extend(e.iter().map(|b| a * b));
        }
        out
    })
}

/// `sum_{i <= M} ln((M/N) lambda_i + sigma2)` over the `M` largest
/// eigenvalues of `K_N`.
pub fn logdet_approx(grams: &[DMatrix<f64>], m: usize, sigma2: f64) -> Result<f64> {
    let mut lam = kron_eigenvalues(&axis_eigenvalues(grams)?);
    let n = lam.len();
    if m == 0 || m > n {
        return Err(invalid(format!("observed count {m} outside 1..={n}")));
    }
    lam.sort_by(|a, b| b.total_cmp(a));
    let scale = m as f64 / n as f64;
    Ok(lam[..m].iter().map(|l| (scale * l.max(0.0) + sigma2).ln()).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_leave_vector() {
        let g = vec![DMatrix::identity(3, 3), DMatrix::identity(2, 2)];
        let v: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        assert_eq!(kron_matvec(&g, &v).unwrap(), v);
    }

    #[test]
    fn scalar_factors_multiply() {
        let g = vec![DMatrix::identity(2, 2) * 2.0, DMatrix::identity(3, 3) * 3.0];
        let v = vec![1.0, -1.0, 0.5, 2.0, 0.0, 4.0];
        let out = kron_matvec(&g, &v).unwrap();
        assert!(out.iter().zip(&v).all(|(o, x)| (o - 6.0 * x).abs() < 1e-15));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let g = vec![DMatrix::identity(2, 2)];
        assert!(kron_matvec(&g, &[1.0; 3]).is_err());
    }

    #[test]
    fn identity_system_halves_targets() {
        let g = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
        let y = [1.0, 2.0, -3.0, 0.5];
        let s = solve_completed_grid(&g, &[true; 4], &y, 1.0, &CgConfig::default(), None).unwrap();
        assert!(s.x.iter().zip(y).all(|(a, b)| (a - b / 2.0).abs() < 1e-9));
    }

    #[test]
    fn identity_logdet() {
        let g = vec![DMatrix::identity(3, 3), DMatrix::identity(2, 2)];
        let got = logdet_approx(&g, 6, 0.5).unwrap();
        assert!((got - 6.0 * 1.5f64.ln()).abs() < 1e-12);
    }
}
