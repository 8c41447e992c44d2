//! Dense symmetric factorization with a jitter ladder and a fast inverse.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{numeric, Result};

/// Block size below which triangular inversion falls back to substitution.
const TRI_BLOCK: usize = 64;

/// Cholesky factor of `A + jitter I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl SpdFactor {
    /// Factorizes `a`, retrying with `1e-8 * mean(diag)` jitter escalated by
    /// 10x up to `1e-2 * mean(diag)`.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let mean_diag = a.diagonal().iter().sum::<f64>() / n.max(1) as f64;
        let base = if mean_diag > 0.0 && mean_diag.is_finite() { mean_diag } else { 1.0 };
        let mut rel = 1e-8;
        while rel <= 1e-2 * (1.0 + 1e-9) {
            let jitter = rel * base;
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(Self { chol, jitter });
            }
            rel *= 10.0;
        }
        let (lo, hi) = a
            .diagonal()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Err(numeric(format!(
            "matrix of size {n} not positive definite even with jitter {:.3e} (diagonal range [{lo:.3e}, {hi:.3e}])",
            1e-2 * base
        )))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let mut out = b.clone();
        l.solve_lower_triangular_mut(&mut out);
        out
    }

    /// `ln |A + jitter I|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `(A + jitter I)^{-1}` as `L^{-T} L^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let li = lower_inverse(&self.chol.l());
        li.transpose() * &li
    }
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking:
/// `[[A, 0], [B, C]]^{-1} = [[A^{-1}, 0], [-C^{-1} B A^{-1}, C^{-1}]]`.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    if n <= TRI_BLOCK {
        let mut inv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            inv[(j, j)] = 1.0 / l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s += l[(i, k)] * inv[(k, j)];
                }
                inv[(i, j)] = -s / l[(i, i)];
            }
        }
        return inv;
    }
    let h = n / 2;
    let ai = lower_inverse(&l.view((0, 0), (h, h)).into_owned());
    let ci = lower_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h)).into_owned();
    let off = -(&ci * (&b * &ai));
    let mut inv = DMatrix::<f64>::zeros(n, n);
    inv.view_mut((0, 0), (h, h)).copy_from(&ai);
    inv.view_mut((h, h), (n - h, n - h)).copy_from(&ci);
    inv.view_mut((h, 0), (n - h, h)).copy_from(&off);
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn blocked_inverse_matches_identity() {
        let a = spd(150);
        let f = SpdFactor::new(&a).unwrap();
        assert_eq!(f.jitter, 0.0);
        let err = (&a * f.inverse() - DMatrix::identity(150, 150)).abs().max();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let f = SpdFactor::new(&a).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn indefinite_matrix_fails_with_diagnostics() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let msg = SpdFactor::new(&a).unwrap_err().to_string();
        assert!(msg.contains("not positive definite"), "{msg}");
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 4.0]));
        let f = SpdFactor::new(&a).unwrap();
        assert!((f.log_det() - 24f64.ln()).abs() < 1e-12);
    }
}
