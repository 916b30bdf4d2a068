//! Sum-rate evaluation and the weighted-MMSE block-coordinate solver used as
//! the spectral-efficiency oracle, for single-cell and coordinated
//! multi-cell downlinks.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{Cholesky, ComplexMatrix};
use crate::precoders::{Baseline, PrecodingMatrix};
use crate::scalar::Real;
use crate::scenario::MultiCellChannel;

/// Per-user rates (bits/s/Hz) and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct SumRate<T> {
    pub per_user: Vec<T>,
    pub total: T,
}

/// Single-cell rates `log2(1 + SINR_k)` with
/// `SINR_k = |h_k^H v_k|^2 / (sum_{j != k} |h_k^H v_j|^2 + sigma2)`.
pub fn sum_rate<T: Real>(h: &ComplexMatrix<T>, v: &ComplexMatrix<T>, sigma2: T) -> Result<SumRate<T>> {
    if h.shape() != v.shape() {
        return Err(invalid(format!("channel {:?} and precoder {:?} differ in shape", h.shape(), v.shape())));
    }
    let k = h.cols();
    let z = h.adjoint_mul(v)?;
    let per_user: Vec<T> = (0..k)
        .map(|u| {
            let total: T = (0..k).map(|j| z[(u, j)].norm_sqr()).sum();
            let signal = z[(u, u)].norm_sqr();
            let interference = total - signal;
            (T::one() + signal / (interference.max(T::zero()) + sigma2)).log2()
        })
        .collect();
    let total = per_user.iter().copied().sum();
    Ok(SumRate { per_user, total })
}

/// Coordinated multi-cell rates. `v[i]` is the `N x K` precoder of BS `i`;
/// `per_user` is ordered cell-major.
pub fn sum_rate_multicell<T: Real>(h: &MultiCellChannel<T>, v: &[ComplexMatrix<T>], sigma2: T) -> Result<SumRate<T>> {
    let (m, n, k) = (h.cells(), h.antennas(), h.users());
    if v.len() != m || v.iter().any(|vi| vi.shape() != (n, k)) {
        return Err(invalid(format!("expected {m} precoders of shape {n}x{k}")));
    }
    let mut per_user = Vec::with_capacity(m * k);
    for cell in 0..m {
        // z[i][(u, j)] = h_{u_cell, i}^H v_{j_i}
        let z: Vec<ComplexMatrix<T>> = (0..m).map(|i| h.block(i, cell).adjoint_mul(&v[i])).collect::<Result<_>>()?;
        for u in 0..k {
            let total: T = z.iter().map(|zi| (0..k).map(|j| zi[(u, j)].norm_sqr()).sum::<T>()).sum();
            let signal = z[cell][(u, u)].norm_sqr();
            let interference = (total - signal).max(T::zero());
            per_user.push((T::one() + signal / (interference + sigma2)).log2());
        }
    }
    let total = per_user.iter().copied().sum();
    Ok(SumRate { per_user, total })
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub max_iterations: usize,
    /// Stop once one sweep improves the sum-rate by less than this (bits/s/Hz).
    pub objective_tolerance: f64,
    /// Relative accuracy of the transmit power reached by the dual bisection.
    /// The sum-rate loss of an inexact dual is first order in this gap, so it
    /// must sit well below [`MONOTONE_SLACK`].
    pub bisection_tolerance: f64,
    /// Reserved for randomized initialization; the closed-form start is deterministic.
    pub seed: u64,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self { max_iterations: 200, objective_tolerance: 1e-5, bisection_tolerance: 1e-12, seed: 0 }
    }
}

impl WmmseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(invalid("max_iterations must be >= 1"));
        }
        if !(self.objective_tolerance > 0.0) || !(self.bisection_tolerance > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        Ok(())
    }
}

/// Converged precoders (one per BS) and the sum-rate after every sweep,
/// starting with the initial point.
#[derive(Debug, Clone)]
pub struct WmmseSolution<T> {
    pub precoders: Vec<PrecodingMatrix<T>>,
    pub objective_trace: Vec<T>,
}

impl<T: Real> WmmseSolution<T> {
    pub fn objective(&self) -> T {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

/// Allowed decrease of the sum-rate between sweeps before the solver reports
/// an internal inconsistency.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Single-cell WMMSE; see [`wmmse_p2`] for the starting point.
pub fn wmmse_p1<T: Real>(h: &ComplexMatrix<T>, p_max: T, sigma2: T, opts: &WmmseOptions) -> Result<WmmseSolution<T>> {
    let hm = MultiCellChannel::new(1, vec![h.clone()])?;
    wmmse_p2(&hm, p_max, sigma2, opts)
}

/// Multi-cell WMMSE started from the best of the per-BS closed-form
/// precoders (MRT, zero-forcing, regularized zero-forcing) by sum-rate.
pub fn wmmse_p2<T: Real>(h: &MultiCellChannel<T>, p_max: T, sigma2: T, opts: &WmmseOptions) -> Result<WmmseSolution<T>> {
    let m = h.cells();
    if (0..m * m).all(|idx| h.block(idx / m, idx % m).frobenius_norm_sqr() == T::zero()) {
        return degenerate_zero(h, p_max);
    }
    let mut best: Option<(T, Vec<ComplexMatrix<T>>)> = None;
    for baseline in [Baseline::Mrt, Baseline::Rzf, Baseline::Zfbf] {
        let Some(cand) = (0..m)
            .map(|i| baseline.precode(h.block(i, i), p_max, sigma2).ok().map(PrecodingMatrix::into_matrix))
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let rate = sum_rate_multicell(h, &cand, sigma2)?.total;
        if best.as_ref().is_none_or(|(r, _)| rate > *r) {
            best = Some((rate, cand));
        }
    }
    let init = match best {
        Some((_, v)) => v,
        // Some user has no direct channel: spread the budget uniformly.
        None => {
            let (n, k) = (h.antennas(), h.users());
            let s = (p_max / T::from_usize_lossy(n * k)).sqrt();
            vec![ComplexMatrix::from_fn(n, k, |_, _| Complex::new(s, T::zero())); m]
        }
    };
    wmmse_from(h, init, p_max, sigma2, opts)
}

fn degenerate_zero<T: Real>(h: &MultiCellChannel<T>, p_max: T) -> Result<WmmseSolution<T>> {
    let precoders = (0..h.cells())
        .map(|_| PrecodingMatrix::new(ComplexMatrix::zeros(h.antennas(), h.users()), p_max))
        .collect::<Result<_>>()?;
    Ok(WmmseSolution { precoders, objective_trace: vec![T::zero()] })
}

/// WMMSE from a caller-supplied feasible starting point.
pub fn wmmse_from<T: Real>(
    h: &MultiCellChannel<T>,
    init: Vec<ComplexMatrix<T>>,
    p_max: T,
    sigma2: T,
    opts: &WmmseOptions,
) -> Result<WmmseSolution<T>> {
    opts.validate()?;
    if !(p_max > T::zero()) || !(sigma2 > T::zero()) {
        return Err(invalid("p_max and sigma2 must be positive"));
    }
    let (m, n, k) = (h.cells(), h.antennas(), h.users());
    if init.len() != m || init.iter().any(|v| v.shape() != (n, k)) {
        return Err(invalid("initial precoders do not match the channel"));
    }
    for v in &init {
        if !(v.frobenius_norm_sqr() <= p_max * (T::one() + T::lit(1e-8))) {
            return Err(invalid("initial precoder violates the power budget"));
        }
    }
    let mut v = init;
    let mut trace = vec![sum_rate_multicell(h, &v, sigma2)?.total];
    let tol = T::lit(opts.objective_tolerance);
    for _ in 0..opts.max_iterations {
        let (u, w) = receivers_and_weights(h, &v, sigma2)?;
        v = (0..m).map(|bs| transmit_update(h, bs, &u, &w, p_max, opts.bisection_tolerance)).collect::<Result<_>>()?;
        let obj = sum_rate_multicell(h, &v, sigma2)?.total;
        let prev = *trace.last().unwrap();
        if !obj.is_finite() {
            return Err(Error::Internal(format!("non-finite WMMSE objective {obj}")));
        }
        let slack = T::lit(MONOTONE_SLACK) * prev.abs().max(T::one());
        if obj < prev - slack {
            return Err(Error::Internal(format!("WMMSE objective decreased from {prev} to {obj}")));
        }
        trace.push(obj);
        if (obj - prev).abs() < tol {
            break;
        }
    }
    let precoders = v
        .into_iter()
        .map(|vi| PrecodingMatrix::new(vi, p_max))
        .collect::<Result<_>>()?;
    Ok(WmmseSolution { precoders, objective_trace: trace })
}

/// MMSE receivers `u` and weights `w = 1/e`, indexed `[cell * K + user]`.
fn receivers_and_weights<T: Real>(
    h: &MultiCellChannel<T>,
    v: &[ComplexMatrix<T>],
    sigma2: T,
) -> Result<(Vec<Complex<T>>, Vec<T>)> {
    let (m, k) = (h.cells(), h.users());
    let mut u = Vec::with_capacity(m * k);
    let mut w = Vec::with_capacity(m * k);
    for cell in 0..m {
        let z: Vec<ComplexMatrix<T>> = (0..m).map(|i| h.block(i, cell).adjoint_mul(&v[i])).collect::<Result<_>>()?;
        for user in 0..k {
            let total: T = z.iter().map(|zi| (0..k).map(|j| zi[(user, j)].norm_sqr()).sum::<T>()).sum::<T>() + sigma2;
            let direct = z[cell][(user, user)];
            u.push(direct / total);
            // 1 - |h^H v|^2 / total, written to avoid cancellation.
            let e = (total - direct.norm_sqr()) / total;
            w.push(T::one() / e.max(T::epsilon()));
        }
    }
    Ok((u, w))
}

/// Precoder update of one BS: `v_k = w_k u_k (A + mu I)^{-1} h_k` with the
/// power dual `mu` chosen by bisection.
fn transmit_update<T: Real>(
    h: &MultiCellChannel<T>,
    bs: usize,
    u: &[Complex<T>],
    w: &[T],
    p_max: T,
    bisection_tol: f64,
) -> Result<ComplexMatrix<T>> {
    let (m, n, k) = (h.cells(), h.antennas(), h.users());
    let mut a = ComplexMatrix::zeros(n, n);
    for cell in 0..m {
        let blk = h.block(bs, cell);
        for user in 0..k {
            let idx = cell * k + user;
            let coef = w[idx] * u[idx].norm_sqr();
            for r in 0..n {
                let hr = blk[(r, user)] * coef;
                for c in 0..n {
                    a[(r, c)] += hr * blk[(c, user)].conj();
                }
            }
        }
    }
    let own = h.block(bs, bs);
    let rhs = ComplexMatrix::from_fn(n, k, |r, c| own[(r, c)] * u[bs * k + c] * w[bs * k + c]);
    if rhs.frobenius_norm_sqr() == T::zero() {
        return Ok(ComplexMatrix::zeros(n, k));
    }

    let solve = |mu: T| -> Option<ComplexMatrix<T>> {
        let mut am = a.clone();
        for i in 0..n {
            am[(i, i)] += Complex::new(mu, T::zero());
        }
        let x = Cholesky::new(&am).ok()?.solve(&rhs);
        x.is_finite().then_some(x)
    };

    let scale = (0..n).map(|i| a[(i, i)].re).fold(T::zero(), T::max).max(T::min_positive_value());
    if let Some(x) = solve(T::zero()) {
        if x.frobenius_norm_sqr() <= p_max {
            return Ok(x);
        }
    }
    let mut hi = scale * T::lit(1e-6);
    let mut x_hi = loop {
        match solve(hi) {
            Some(x) if x.frobenius_norm_sqr() <= p_max => break x,
            _ => hi *= T::lit(4.0),
        }
        if !hi.is_finite() {
            return Err(Error::Internal("dual bracket did not close".into()));
        }
    };
    let mut lo = T::zero();
    let tol = T::lit(bisection_tol);
    for _ in 0..200 {
        let power = x_hi.frobenius_norm_sqr();
        if p_max - power <= tol * p_max || hi - lo <= T::epsilon() * hi {
            break;
        }
        let mid = (lo + hi) * T::lit(0.5);
        match solve(mid) {
            Some(x) if x.frobenius_norm_sqr() <= p_max => {
                hi = mid;
                x_hi = x;
            }
            _ => lo = mid,
        }
    }
    Ok(x_hi)
}
