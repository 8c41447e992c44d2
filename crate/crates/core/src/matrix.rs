use num_complex::Complex64;

/// Dense row-major matrix of complex kernel values.
///
/// The imaginary plane is only allocated for nodes that can carry a nonzero
/// imaginary part; real nodes keep `im == None`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelValueMatrix {
    rows: usize,
    cols: usize,
    pub re: Vec<f64>,
    pub im: Option<Vec<f64>>,
    /// Built from a single point set (`k(X, X)`), hence conjugate-symmetric.
    pub symmetric: bool,
}

impl KernelValueMatrix {
    pub fn zeros(rows: usize, cols: usize, complex: bool, symmetric: bool) -> Self {
        let len = rows * cols;
        Self {
            rows,
            cols,
            re: vec![0.0; len],
            im: complex.then(|| vec![0.0; len]),
            symmetric,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64, symmetric: bool) -> Self {
        Self { rows, cols, re: vec![value; rows * cols], im: None, symmetric }
    }

    pub fn from_real(rows: usize, cols: usize, re: Vec<f64>) -> Self {
        assert_eq!(re.len(), rows * cols);
        Self { rows, cols, re, im: None, symmetric: false }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.re.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    #[inline]
    pub fn is_real(&self) -> bool {
        self.im.is_none()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let k = i * self.cols + j;
        Complex64::new(self.re[k], self.im.as_ref().map_or(0.0, |im| im[k]))
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        let k = i * self.cols + j;
        self.re[k] = v.re;
        if let Some(im) = self.im.as_mut() {
            im[k] = v.im;
        }
    }

    /// Drops the imaginary plane.
    pub fn into_real(mut self) -> Self {
        self.im = None;
        self
    }

    pub fn ensure_complex(&mut self) {
        if self.im.is_none() {
            self.im = Some(vec![0.0; self.re.len()]);
        }
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        let bad_re = self.re.iter().position(|v| !v.is_finite());
        let bad_im = self.im.as_ref().and_then(|im| im.iter().position(|v| !v.is_finite()));
        match (bad_re, bad_im) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn to_dmatrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.re)
    }

    /// `self += w * other`, promoting to complex if needed.
    pub fn axpy(&mut self, w: f64, other: &KernelValueMatrix) {
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += w * b;
        }
        if let Some(oim) = other.im.as_ref() {
            self.ensure_complex();
            let im = self.im.as_mut().expect("complex plane");
            for (a, b) in im.iter_mut().zip(oim) {
                *a += w * b;
            }
        }
    }

    /// [`Self::axpy`] restricted to the flat entry range `r`; `self` must
    /// already be complex when `other` is.
    pub fn axpy_range(&mut self, w: f64, other: &KernelValueMatrix, r: std::ops::Range<usize>) {
        for (a, b) in self.re[r.clone()].iter_mut().zip(&other.re[r.clone()]) {
            *a += w * b;
        }
        if let Some(oim) = other.im.as_ref() {
            let im = self.im.as_mut().expect("complex destination");
            for (a, b) in im[r.clone()].iter_mut().zip(&oim[r]) {
                *a += w * b;
            }
        }
    }

    /// [`Self::real_inner`] restricted to the flat entry range `r`.
    pub fn real_inner_range(&self, other: &KernelValueMatrix, r: std::ops::Range<usize>) -> f64 {
        let mut acc: f64 = self.re[r.clone()].iter().zip(&other.re[r.clone()]).map(|(a, b)| a * b).sum();
        if let (Some(ai), Some(bi)) = (self.im.as_ref(), other.im.as_ref()) {
            acc += ai[r.clone()].iter().zip(&bi[r]).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    pub fn add_scalar(&mut self, c: f64) {
        for a in self.re.iter_mut() {
            *a += c;
        }
    }

    /// Elementwise complex product in place.
    pub fn mul_assign_elementwise(&mut self, other: &KernelValueMatrix) {
        match (self.im.as_mut(), other.im.as_ref()) {
            (None, None) => {
                for (a, b) in self.re.iter_mut().zip(&other.re) {
                    *a *= b;
                }
            }
            (Some(ai), None) => {
                for k in 0..self.re.len() {
                    self.re[k] *= other.re[k];
                    ai[k] *= other.re[k];
                }
            }
            (None, Some(bi)) => {
                let mut im = vec![0.0; self.re.len()];
                for k in 0..self.re.len() {
                    let ar = self.re[k];
                    self.re[k] = ar * other.re[k];
                    im[k] = ar * bi[k];
                }
                self.im = Some(im);
            }
            (Some(ai), Some(bi)) => {
                for k in 0..self.re.len() {
                    let (ar, aim) = (self.re[k], ai[k]);
                    let (br, bim) = (other.re[k], bi[k]);
                    self.re[k] = ar * br - aim * bim;
                    ai[k] = ar * bim + aim * br;
                }
            }
        }
    }

    /// `sum_k Re(conj(self_k) * other_k)`, the real inner product used for adjoints.
    pub fn real_inner(&self, other: &KernelValueMatrix) -> f64 {
        let mut acc: f64 = self.re.iter().zip(&other.re).map(|(a, b)| a * b).sum();
        if let (Some(ai), Some(bi)) = (self.im.as_ref(), other.im.as_ref()) {
            acc += ai.iter().zip(bi).map(|(a, b)| a * b).sum::<f64>();
        }
        acc
    }

    pub fn trace(&self) -> Complex64 {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.get(i, i)).sum()
    }
}
