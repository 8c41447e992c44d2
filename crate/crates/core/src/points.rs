use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row-major `n x d` block of input points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(invalid(format!(
                "point buffer has {} values, expected {n}x{d}",
                data.len()
            )));
        }
        Ok(Self { n, d, data })
    }

    /// Empty set of `d`-dimensional points.
    pub fn empty(d: usize) -> Self {
        Self { n: 0, d, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(invalid(format!("row {i} has {} columns, expected {d}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { n: rows.len(), d, data })
    }

    /// One-dimensional points from a slice of scalars.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Self { n: xs.len(), d: 1, data: xs.to_vec() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { n: idx.len(), d: self.d, data }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.n > 0 && row.len() != self.d {
            return Err(invalid(format!("row has {} columns, expected {}", row.len(), self.d)));
        }
        if self.n == 0 {
            self.d = row.len();
        }
        self.data.extend_from_slice(row);
        self.n += 1;
        Ok(())
    }

    pub fn map_rows(&self, mut f: impl FnMut(&[f64], &mut [f64])) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.n {
            f(self.row(i), &mut data[i * self.d..(i + 1) * self.d]);
        }
        Self { n: self.n, d: self.d, data }
    }
}
