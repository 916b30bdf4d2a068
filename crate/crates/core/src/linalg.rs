//! Dense complex linear algebra: a small row-major matrix type, Hermitian
//! Cholesky solves, the exact pseudo-inverse and its iterative first-order
//! Taylor (Newton-Schulz) approximation.

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Dense complex matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> ComplexMatrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from its columns; all columns must share a length.
    pub fn from_columns(columns: &[Vec<Complex<T>>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(invalid("columns of unequal length"));
        }
        Ok(Self::from_fn(rows, cols, |r, c| columns[c][r]))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[Complex<T>]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a.is_zero() {
                    continue;
                }
                let row = &rhs.data[l * rhs.cols..(l + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * *b;
                }
            }
        }
        Ok(out)
    }

    /// `self^H * rhs` without materializing the adjoint.
    pub fn adjoint_mul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(invalid(format!(
                "cannot form A^H B for A {}x{} and B {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for l in 0..self.rows {
            for i in 0..self.cols {
                let a = self[(l, i)].conj();
                let row = &rhs.data[l * rhs.cols..(l + 1) * rhs.cols];
                let dst = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * *b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(Complex<T>, Complex<T>) -> Complex<T>) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(invalid(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|z| f(*z)).collect() }
    }

    pub fn frobenius_norm_sqr(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.frobenius_norm_sqr().sqrt()
    }

    /// Squared Euclidean norm of column `c`.
    pub fn column_norm_sqr(&self, c: usize) -> T {
        (0..self.rows).map(|r| self[(r, c)].norm_sqr()).sum()
    }

    /// Hermitian inner product `col_a(self)^H col_b(other)`.
    pub fn column_inner(&self, a: usize, other: &Self, b: usize) -> Complex<T> {
        (0..self.rows).fold(Complex::zero(), |acc, r| acc + self[(r, a)].conj() * other[(r, b)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `P_rows^T * self * P_cols`, where `row_perm[i]` is the source row of
    /// output row `i` and likewise for columns.
    pub fn permute(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        Self::from_fn(row_perm.len(), col_perm.len(), |r, c| self[(row_perm[r], col_perm[c])])
    }

    /// Keeps the listed columns in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    pub fn hstack(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(invalid("hstack needs equal row counts"));
        }
        Ok(Self::from_fn(self.rows, self.cols + rhs.cols, |r, c| {
            if c < self.cols {
                self[(r, c)]
            } else {
                rhs[(r, c - self.cols)]
            }
        }))
    }

    pub fn cast<U: Real>(&self) -> ComplexMatrix<U> {
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|z| Complex::new(U::lit(z.re.as_f64()), U::lit(z.im.as_f64())))
                .collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for ComplexMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[r * self.cols + c]
    }
}

/// Lower-triangular Cholesky factor of a Hermitian positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    lower: ComplexMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors `a = L L^H`. Fails with [`Error::Singular`] on a non-positive pivot.
    pub fn new(a: &ComplexMatrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(invalid("Cholesky needs a square matrix"));
        }
        let mut l = ComplexMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)].re;
            for p in 0..j {
                diag -= l[(j, p)].norm_sqr();
            }
            if !(diag > T::zero()) {
                return Err(Error::Singular { condition: f64::INFINITY });
            }
            let djj = diag.sqrt();
            l[(j, j)] = Complex::new(djj, T::zero());
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// Solves `a x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.dim();
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in 0..i {
                s -= l[(i, p)] * y[p];
            }
            y[i] = s / l[(i, i)].re;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for p in (i + 1)..n {
                s -= l[(p, i)].conj() * y[p];
            }
            y[i] = s / l[(i, i)].re;
        }
        y
    }

    /// Solves `a X = B` column by column.
    pub fn solve(&self, b: &ComplexMatrix<T>) -> ComplexMatrix<T> {
        let mut x = ComplexMatrix::zeros(b.rows(), b.cols());
        for c in 0..b.cols() {
            let col = self.solve_vec(&b.column(c));
            x.set_column(c, &col);
        }
        x
    }
}

/// Gram matrix `H^H H`.
pub fn gram<T: Real>(h: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    h.adjoint_mul(h).expect("self product is always conformable")
}

/// Largest eigenvalue of a Hermitian PSD matrix by power iteration from the
/// all-ones vector.
pub fn power_iteration_max_eig<T: Real>(a: &ComplexMatrix<T>, steps: usize) -> T {
    let n = a.rows();
    if n == 0 {
        return T::zero();
    }
    let mut x = vec![Complex::new(T::one(), T::zero()); n];
    let mut lambda = T::zero();
    for _ in 0..steps.max(1) {
        let y = mat_vec(a, &x);
        let norm = vec_norm(&y);
        if norm == T::zero() {
            return T::zero();
        }
        // Rayleigh quotient with the normalized iterate.
        let xn = vec_norm(&x);
        lambda = dot(&x, &y).re / (xn * xn);
        x = y.into_iter().map(|z| z / norm).collect();
    }
    lambda
}

/// Squared largest singular value of `h` from power iteration on `H^H H`.
pub fn spectral_norm_sqr<T: Real>(h: &ComplexMatrix<T>, steps: usize) -> T {
    power_iteration_max_eig(&gram(h), steps)
}

/// Condition number of a Hermitian positive-definite matrix estimated by
/// power iteration (largest eigenvalue) and inverse iteration through its
/// Cholesky factor (smallest eigenvalue).
pub fn condition_estimate<T: Real>(a: &ComplexMatrix<T>, chol: &Cholesky<T>, steps: usize) -> T {
    let lmax = power_iteration_max_eig(a, steps);
    let n = a.rows();
    let mut x = vec![Complex::new(T::one(), T::zero()); n];
    let mut mu = T::zero();
    for _ in 0..steps.max(1) {
        let y = chol.solve_vec(&x);
        let norm = vec_norm(&y);
        if !(norm.is_finite()) || norm == T::zero() {
            return T::infinity();
        }
        let xn = vec_norm(&x);
        mu = dot(&x, &y).re / (xn * xn);
        x = y.into_iter().map(|z| z / norm).collect();
    }
    if mu <= T::zero() {
        return T::infinity();
    }
    // mu estimates the largest eigenvalue of a^{-1}.
    lmax * mu
}

pub(crate) fn mat_vec<T: Real>(a: &ComplexMatrix<T>, x: &[Complex<T>]) -> Vec<Complex<T>> {
    (0..a.rows())
        .map(|r| (0..a.cols()).fold(Complex::zero(), |acc, c| acc + a[(r, c)] * x[c]))
        .collect()
}

pub(crate) fn dot<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(Complex::zero(), |acc, (x, y)| acc + x.conj() * *y)
}

pub(crate) fn vec_norm<T: Real>(a: &[Complex<T>]) -> T {
    a.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

/// Conditions at or above this estimate are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

const CONDITION_STEPS: usize = 30;

/// Exact pseudo-inverse in the zero-forcing orientation, `H (H^H H)^{-1}`,
/// for a tall full-column-rank `H`. The result has the shape of `H`.
pub fn pinv_exact<T: Real>(h: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    let (n, k) = h.shape();
    if n < k {
        return Err(invalid(format!("pseudo-inverse needs N >= K, got {n}x{k}")));
    }
    if k == 0 {
        return Ok(ComplexMatrix::zeros(n, 0));
    }
    let g = gram(h);
    let chol = Cholesky::new(&g)?;
    let cond = condition_estimate(&g, &chol, CONDITION_STEPS);
    if !(cond.as_f64() < CONDITION_LIMIT) {
        return Err(Error::Singular { condition: cond.as_f64() });
    }
    let eye = ComplexMatrix::identity(k);
    let mut x = chol.solve(&eye);
    // One round of iterative refinement on G X = I.
    let residual = eye.sub(&g.matmul(&x)?)?;
    x = x.add(&chol.solve(&residual))?;
    h.matmul(&x)
}

/// Initial value for the Taylor pseudo-inverse recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaylorInit {
    /// `D0 = H`; only locally convergent.
    Raw,
    /// `D0 = H / sigma_max(H)^2`, which puts `I - H^H D0` inside the unit ball.
    SpectralScaled,
}

/// Power-iteration steps used to estimate `sigma_max^2` for [`TaylorInit::SpectralScaled`].
pub const SPECTRAL_STEPS: usize = 20;

/// One first-order Taylor step `2D - D (H^H D)`.
pub fn taylor_pinv_step<T: Real>(d: &ComplexMatrix<T>, h: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
    if d.shape() != h.shape() {
        return Err(invalid(format!(
            "Taylor step shape mismatch: D {:?}, H {:?}",
            d.shape(),
            h.shape()
        )));
    }
    let a = h.adjoint_mul(d)?;
    let da = d.matmul(&a)?;
    d.scale(T::lit(2.0)).sub(&da)
}

/// Starting point of the recursion for the given initialization.
pub fn taylor_init<T: Real>(h: &ComplexMatrix<T>, init: TaylorInit) -> ComplexMatrix<T> {
    match init {
        TaylorInit::Raw => h.clone(),
        TaylorInit::SpectralScaled => {
            let s = spectral_norm_sqr(h, SPECTRAL_STEPS);
            if s > T::zero() {
                h.scale(T::one() / s)
            } else {
                h.clone()
            }
        }
    }
}

/// Result of running the Taylor pseudo-inverse recursion.
#[derive(Debug, Clone)]
pub struct TaylorPinv<T> {
    pub approx: ComplexMatrix<T>,
    /// Frobenius distance to the exact pseudo-inverse after each step,
    /// starting with the initial value.
    pub error_trace: Vec<T>,
}

/// Applies [`taylor_pinv_step`] `iterations` times and records the distance
/// to [`pinv_exact`] at every step.
pub fn taylor_pinv<T: Real>(h: &ComplexMatrix<T>, iterations: usize, init: TaylorInit) -> Result<TaylorPinv<T>> {
    let (n, k) = h.shape();
    if n < k {
        return Err(invalid(format!("Taylor pseudo-inverse needs N >= K, got {n}x{k}")));
    }
    let exact = pinv_exact(h)?;
    let mut d = taylor_init(h, init);
    let mut error_trace = Vec::with_capacity(iterations + 1);
    error_trace.push(d.sub(&exact)?.frobenius_norm());
    for _ in 0..iterations {
        d = taylor_pinv_step(&d, h)?;
        error_trace.push(d.sub(&exact)?.frobenius_norm());
    }
    Ok(TaylorPinv { approx: d, error_trace })
}

/// Same recursion without the reference trace; used where only the output
/// matters (e.g. precoding).
pub fn taylor_pinv_approx<T: Real>(h: &ComplexMatrix<T>, iterations: usize, init: TaylorInit) -> Result<ComplexMatrix<T>> {
    let mut d = taylor_init(h, init);
    for _ in 0..iterations {
        d = taylor_pinv_step(&d, h)?;
    }
    Ok(d)
}
