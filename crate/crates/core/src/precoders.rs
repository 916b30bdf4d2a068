//! Closed-form precoders: MRT, zero-forcing, regularized zero-forcing, the
//! optimal-structure evaluator, output power normalization and the
//! Taylor-iteration precoder.

use num_complex::Complex;

use crate::error::{invalid, Error, Result};
use crate::linalg::{gram, pinv_exact, taylor_pinv_approx, Cholesky, ComplexMatrix, TaylorInit};
use crate::scalar::Real;

/// Relative slack allowed on the transmit power constraint.
pub const POWER_SLACK: f64 = 1e-9;

/// An `N x K` precoder that respects `trace(V^H V) <= p_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingMatrix<T> {
    v: ComplexMatrix<T>,
    p_max: T,
}

impl<T: Real> PrecodingMatrix<T> {
    pub fn new(v: ComplexMatrix<T>, p_max: T) -> Result<Self> {
        if !(p_max > T::zero()) {
            return Err(invalid("p_max must be positive"));
        }
        let power = v.frobenius_norm_sqr();
        if !(power <= p_max * (T::one() + T::lit(POWER_SLACK))) {
            return Err(invalid(format!("transmit power {power} exceeds budget {p_max}")));
        }
        Ok(Self { v, p_max })
    }

    pub fn matrix(&self) -> &ComplexMatrix<T> {
        &self.v
    }

    pub fn into_matrix(self) -> ComplexMatrix<T> {
        self.v
    }

    pub fn p_max(&self) -> T {
        self.p_max
    }

    /// `trace(V^H V)`.
    pub fn power(&self) -> T {
        self.v.frobenius_norm_sqr()
    }
}

fn check_power(p_max: impl Real) -> Result<()> {
    if !(p_max > num_traits::zero()) {
        return Err(invalid("p_max must be positive"));
    }
    Ok(())
}

/// Rescales every column to power `p_max / K`.
pub fn equal_power_columns<T: Real>(m: &ComplexMatrix<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
    check_power(p_max)?;
    let k = m.cols();
    if k == 0 {
        return PrecodingMatrix::new(m.clone(), p_max);
    }
    let per_user = p_max / T::from_usize_lossy(k);
    let mut v = m.clone();
    for c in 0..k {
        let norm = m.column_norm_sqr(c).sqrt();
        if !(norm > T::zero()) {
            return Err(invalid(format!("column {c} is zero")));
        }
        let s = per_user.sqrt() / norm;
        for r in 0..m.rows() {
            v[(r, c)] = m[(r, c)] * s;
        }
    }
    PrecodingMatrix::new(v, p_max)
}

/// Maximum-ratio transmission with equal per-user power.
pub fn mrt<T: Real>(h: &ComplexMatrix<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
    equal_power_columns(h, p_max)
}

/// Zero-forcing beamforming with equal per-user power.
pub fn zfbf<T: Real>(h: &ComplexMatrix<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
    check_power(p_max)?;
    equal_power_columns(&pinv_exact(h)?, p_max)
}

/// Regularized zero-forcing `H (H^H H + (K sigma2 / p_max) I)^{-1}` with
/// equal per-user power.
pub fn rzf<T: Real>(h: &ComplexMatrix<T>, p_max: T, sigma2: T) -> Result<PrecodingMatrix<T>> {
    check_power(p_max)?;
    if !(sigma2 >= T::zero()) {
        return Err(invalid("sigma2 must be non-negative"));
    }
    let k = h.cols();
    let alpha = T::from_usize_lossy(k) * sigma2 / p_max;
    let mut g = gram(h);
    for i in 0..k {
        g[(i, i)] += Complex::new(alpha, T::zero());
    }
    let x = Cholesky::new(&g)?.solve(&ComplexMatrix::identity(k));
    equal_power_columns(&h.matmul(&x)?, p_max)
}

/// Evaluates the optimal-solution structure `H (Lambda H^H H + sigma2 I)^{-1} T^{1/2}`
/// for given diagonal multipliers. Both diagonals must sum to `p_max`.
///
/// The result is not power-normalized: with non-optimal multipliers it need
/// not meet the budget, so it is returned as a raw matrix.
pub fn structured_precoder<T: Real>(
    h: &ComplexMatrix<T>,
    lambda_diag: &[T],
    t_diag: &[T],
    sigma2: T,
    p_max: T,
) -> Result<ComplexMatrix<T>> {
    check_power(p_max)?;
    let k = h.cols();
    if lambda_diag.len() != k || t_diag.len() != k {
        return Err(invalid(format!("multiplier diagonals must have length K = {k}")));
    }
    if lambda_diag.iter().any(|&l| !(l > T::zero())) {
        return Err(invalid("lambda entries must be positive"));
    }
    if t_diag.iter().any(|&t| !(t >= T::zero())) {
        return Err(invalid("t entries must be non-negative"));
    }
    let tol = T::lit(1e-6) * p_max.max(T::one());
    let lt: T = lambda_diag.iter().copied().sum();
    let tt: T = t_diag.iter().copied().sum();
    if (lt - p_max).abs() > tol || (tt - p_max).abs() > tol {
        return Err(invalid(format!("trace(Lambda) = {lt}, trace(T) = {tt}, expected {p_max}")));
    }
    // Lambda G + s I = L^{1/2} (L^{1/2} G L^{1/2} + s I) L^{-1/2}, and the
    // middle factor is Hermitian positive definite.
    let g = gram(h);
    let ls: Vec<T> = lambda_diag.iter().map(|l| l.sqrt()).collect();
    let mut sym = ComplexMatrix::from_fn(k, k, |r, c| g[(r, c)] * ls[r] * ls[c]);
    for i in 0..k {
        sym[(i, i)] += Complex::new(sigma2, T::zero());
    }
    let sym_inv = Cholesky::new(&sym)?.solve(&ComplexMatrix::identity(k));
    let inv = ComplexMatrix::from_fn(k, k, |r, c| sym_inv[(r, c)] * ls[r] / ls[c]);
    let hx = h.matmul(&inv)?;
    Ok(ComplexMatrix::from_fn(h.rows(), k, |r, c| hx[(r, c)] * t_diag[c].sqrt()))
}

/// `sqrt(p_max) V / ||V||_F`, so the budget is met with equality.
pub fn power_normalize<T: Real>(v_raw: &ComplexMatrix<T>, p_max: T) -> Result<PrecodingMatrix<T>> {
    check_power(p_max)?;
    let norm = v_raw.frobenius_norm();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize matrix with norm {norm}")));
    }
    PrecodingMatrix::new(v_raw.scale(p_max.sqrt() / norm), p_max)
}

/// Precoder produced by `iterations` spectrally-initialized Taylor steps,
/// with equal per-user power. Zero iterations reproduces MRT.
pub fn tgnn_precoder<T: Real>(h: &ComplexMatrix<T>, iterations: usize, p_max: T) -> Result<PrecodingMatrix<T>> {
    check_power(p_max)?;
    let (n, k) = h.shape();
    if n < k {
        return Err(invalid(format!("Taylor precoder needs N >= K, got {n}x{k}")));
    }
    equal_power_columns(&taylor_pinv_approx(h, iterations, TaylorInit::SpectralScaled)?, p_max)
}

/// Baseline selector used by evaluation and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Mrt,
    Zfbf,
    Rzf,
    Tgnn { iterations: usize },
}

impl Baseline {
    pub fn precode<T: Real>(&self, h: &ComplexMatrix<T>, p_max: T, sigma2: T) -> Result<PrecodingMatrix<T>> {
        match *self {
            Baseline::Mrt => mrt(h, p_max),
            Baseline::Zfbf => zfbf(h, p_max),
            Baseline::Rzf => rzf(h, p_max, sigma2),
            Baseline::Tgnn { iterations } => tgnn_precoder(h, iterations, p_max),
        }
    }
}
