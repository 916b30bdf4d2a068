//! Evaluation metrics, closed-form FLOP counts and generalization sweeps.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gnn::{GnnParams, ScaleAdapter};
use crate::linalg::ComplexMatrix;
use crate::scalar::Real;
use crate::scenario::{random_channel, sample_rng, MultiCellChannel};
use crate::train::{policy_precoders, PowerModel};
use crate::wmmse::{sum_rate, sum_rate_multicell, wmmse_p1, WmmseOptions};

/// One evaluation, emitted as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub arch: String,
    pub antennas: usize,
    pub users: usize,
    pub samples: usize,
    /// Mean sum-rate, bits/s/Hz.
    pub sum_rate: f64,
    /// Percent of the oracle's mean sum-rate.
    pub se_ratio: Option<f64>,
    /// Mean energy efficiency.
    pub ee: Option<f64>,
    /// Percent of the reference energy efficiency.
    pub ee_ratio: Option<f64>,
    /// Percent of user-sample pairs meeting `r_min`.
    pub csr: Option<f64>,
    /// Per-user rates averaged over samples.
    pub per_user_rates: Vec<f64>,
    /// Smallest and median normalized correlation over all user-sample pairs.
    #[serde(default)]
    pub correlation_min: Option<f64>,
    #[serde(default)]
    pub correlation_median: Option<f64>,
    pub flops: Option<u128>,
    pub wall_clock: f64,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record fields are serializable")
    }
}

/// Appends records to a JSON-lines sink.
pub fn write_json_lines<W: Write>(mut out: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow<'a> {
    scenario: &'a str,
    arch: &'a str,
    antennas: usize,
    users: usize,
    samples: usize,
    sum_rate: f64,
    se_ratio: Option<f64>,
    ee: Option<f64>,
    ee_ratio: Option<f64>,
    csr: Option<f64>,
    flops: Option<u128>,
    wall_clock: f64,
}

/// Writes sweep rows as CSV; per-user rates are omitted.
pub fn write_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(SweepRow {
            scenario: &r.scenario,
            arch: &r.arch,
            antennas: r.antennas,
            users: r.users,
            samples: r.samples,
            sum_rate: r.sum_rate,
            se_ratio: r.se_ratio,
            ee: r.ee,
            ee_ratio: r.ee_ratio,
            csr: r.csr,
            flops: r.flops,
            wall_clock: r.wall_clock,
        })
        .map_err(|e| Error::Internal(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn check_matched(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{a} channels but {b} precoders")));
    }
    Ok(())
}

/// `100 * mean(learned sum-rate) / mean(oracle sum-rate)`.
pub fn se_ratio<T: Real>(
    h: &[ComplexMatrix<T>],
    learned: &[ComplexMatrix<T>],
    oracle: &[ComplexMatrix<T>],
    sigma2: T,
) -> Result<f64> {
    check_matched(h.len(), learned.len())?;
    check_matched(h.len(), oracle.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((h, v), o) in h.iter().zip(learned).zip(oracle) {
        num += sum_rate(h, v, sigma2)?.total.as_f64();
        den += sum_rate(h, o, sigma2)?.total.as_f64();
    }
    ratio_of_sums(num, den)
}

/// `100 * num / den`, rejecting a zero oracle.
pub fn ratio_of_sums(num: f64, den: f64) -> Result<f64> {
    if !(den > 0.0) {
        return Err(Error::Degenerate("oracle sum-rate is zero".into()));
    }
    Ok(100.0 * num / den)
}

/// Multi-cell counterpart of [`se_ratio`]; each sample carries one precoder
/// per BS.
pub fn se_ratio_multicell<T: Real>(
    h: &[MultiCellChannel<T>],
    learned: &[Vec<ComplexMatrix<T>>],
    oracle: &[Vec<ComplexMatrix<T>>],
    sigma2: T,
) -> Result<f64> {
    check_matched(h.len(), learned.len())?;
    check_matched(h.len(), oracle.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((h, v), o) in h.iter().zip(learned).zip(oracle) {
        num += sum_rate_multicell(h, v, sigma2)?.total.as_f64();
        den += sum_rate_multicell(h, o, sigma2)?.total.as_f64();
    }
    ratio_of_sums(num, den)
}

/// `sum_k R_k / (rho Tr(V^H V) + N p_c + p_0)` with `N = h.rows()`.
pub fn ee<T: Real>(h: &ComplexMatrix<T>, v: &ComplexMatrix<T>, power: &PowerModel, sigma2: T) -> Result<T> {
    let r = sum_rate(h, v, sigma2)?.total;
    let denom = T::lit(power.rho) * v.frobenius_norm_sqr()
        + T::lit(h.rows() as f64 * power.p_c + power.p_0);
    if !(denom > T::zero()) {
        return Err(invalid("energy-efficiency denominator must be positive"));
    }
    Ok(r / denom)
}

/// Percent of user-sample pairs with `R_k >= r_min`.
pub fn constraint_satisfaction_ratio<T: Real>(
    h: &[ComplexMatrix<T>],
    v: &[ComplexMatrix<T>],
    r_min: T,
    sigma2: T,
) -> Result<f64> {
    check_matched(h.len(), v.len())?;
    let (mut met, mut total) = (0usize, 0usize);
    for (h, v) in h.iter().zip(v) {
        let r = sum_rate(h, v, sigma2)?;
        met += r.per_user.iter().filter(|&&x| x >= r_min).count();
        total += r.per_user.len();
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * met as f64 / total as f64)
}

/// `|h_k^H v_k| / (||h_k|| ||v_k||)` for every user.
pub fn normalized_correlation<T: Real>(h: &ComplexMatrix<T>, v: &ComplexMatrix<T>) -> Result<Vec<T>> {
    if h.shape() != v.shape() {
        return Err(invalid("channel and precoder differ in shape"));
    }
    (0..h.cols())
        .map(|k| {
            let nh = h.column_norm_sqr(k).sqrt();
            let nv = v.column_norm_sqr(k).sqrt();
            if nh == T::zero() || nv == T::zero() {
                return Err(Error::Degenerate(format!("zero column {k}")));
            }
            Ok((h.column_inner(k, v, k).norm() / (nh * nv)).min(T::one()))
        })
        .collect()
}

/// Values sorted ascending, ready to plot as an empirical CDF.
pub fn empirical_cdf(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let v = empirical_cdf(values);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopArch {
    Vanilla,
    Model,
}

/// Closed-form forward FLOPs summed over layers.
///
/// Vanilla: `6 N K J' J + 2 N K J`. Model: `2 N K^2 J + 12 N K J' J - 2 K J' J + 4 N K J`.
pub fn flop_count(arch: FlopArch, n: usize, k: usize, widths: &[usize]) -> Result<u128> {
    if widths.len() < 2 {
        return Err(invalid("need at least two widths"));
    }
    let (n, k) = (n as u128, k as u128);
    let mut total = 0u128;
    for w in widths.windows(2) {
        let (j, jn) = (w[0] as u128, w[1] as u128);
        total += match arch {
            FlopArch::Vanilla => 6 * n * k * jn * j + 2 * n * k * j,
            FlopArch::Model => 2 * n * k * k * j + 12 * n * k * jn * j + 4 * n * k * j - 2 * k * jn * j,
        };
    }
    Ok(total)
}

/// Reference for SE ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    Wmmse,
    None,
}

/// Sweep settings: one row per user count, fresh channels per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub antennas: usize,
    pub users: Vec<usize>,
    pub samples: usize,
    pub snr_db: f64,
    pub seed: u64,
    pub oracle: Oracle,
    pub arch: String,
    pub wmmse: WmmseOptions,
}

/// Evaluates a trained single-cell policy at each user count without
/// retraining. With an adapter the policy is evaluated as an EE policy.
pub fn generalization_sweep(
    params: &GnnParams<f64>,
    adapter: Option<&ScaleAdapter<f64>>,
    spec: &SweepSpec,
) -> Result<Vec<MetricsRecord>> {
    let sigma2 = 10f64.powf(-spec.snr_db / 10.0);
    spec.users
        .iter()
        .map(|&k| {
            let hs: Vec<ComplexMatrix<f64>> = (0..spec.samples)
                .map(|s| random_channel(spec.antennas, k, &mut sample_rng(spec.seed ^ (k as u64) << 32, s as u64)))
                .collect();
            evaluate_policy(params, adapter, &hs, 1.0, sigma2, spec.oracle, &spec.wmmse, &spec.arch)
        })
        .collect()
}

/// WMMSE precoders for each channel at budget `p_max`.
pub fn wmmse_oracle(hs: &[ComplexMatrix<f64>], p_max: f64, sigma2: f64, opts: &WmmseOptions) -> Result<Vec<ComplexMatrix<f64>>> {
    hs.iter()
        .map(|h| Ok(wmmse_p1(h, p_max, sigma2, opts)?.precoders.remove(0).into_matrix()))
        .collect()
}

/// Metrics of a single-cell policy on physical channels `hs`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    params: &GnnParams<f64>,
    adapter: Option<&ScaleAdapter<f64>>,
    hs: &[ComplexMatrix<f64>],
    p_max: f64,
    sigma2: f64,
    oracle: Oracle,
    opts: &WmmseOptions,
    arch: &str,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let scale = (p_max / sigma2).sqrt();
    let scaled: Vec<_> = hs.iter().map(|h| MultiCellChannel::single(h.scale(scale))).collect();
    let vs: Vec<ComplexMatrix<f64>> = policy_precoders(params, adapter, &scaled)?
        .into_iter()
        .map(|mut v| v.remove(0).scale(p_max.sqrt()))
        .collect();
    let oracle_vs = match oracle {
        Oracle::Wmmse => Some(wmmse_oracle(hs, p_max, sigma2, opts)?),
        Oracle::None => None,
    };
    let mut rec = summarize(hs, &vs, oracle_vs.as_deref(), sigma2, arch)?;
    if adapter.is_some() {
        let power = PowerModel::default();
        let total: f64 = hs.iter().zip(&vs).map(|(h, v)| ee(h, v, &power, sigma2)).sum::<Result<f64>>()?;
        rec.ee = Some(total / hs.len().max(1) as f64);
    }
    rec.wall_clock = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Sum-rate, per-user rates and, with an oracle, the SE ratio.
pub fn summarize(
    hs: &[ComplexMatrix<f64>],
    vs: &[ComplexMatrix<f64>],
    oracle: Option<&[ComplexMatrix<f64>]>,
    sigma2: f64,
    arch: &str,
) -> Result<MetricsRecord> {
    check_matched(hs.len(), vs.len())?;
    let (n, k) = hs.first().map(|h| h.shape()).unwrap_or((0, 0));
    let mut per_user = vec![0.0; k];
    let mut total = 0.0;
    for (h, v) in hs.iter().zip(vs) {
        let r = sum_rate(h, v, sigma2)?;
        total += r.total;
        if r.per_user.len() == k {
            per_user.iter_mut().zip(&r.per_user).for_each(|(a, b)| *a += b);
        }
    }
    let count = hs.len().max(1) as f64;
    per_user.iter_mut().for_each(|x| *x /= count);
    let se_ratio = match oracle {
        Some(o) => Some(se_ratio(hs, vs, o, sigma2)?),
        None => None,
    };
    let correlations: Option<Vec<f64>> = hs
        .iter()
        .zip(vs)
        .map(|(h, v)| normalized_correlation(h, v).ok())
        .collect::<Option<Vec<_>>>()
        .map(|v| v.concat());
    let correlations = correlations.filter(|c| !c.is_empty());
    Ok(MetricsRecord {
        scenario: format!("N{n}K{k}"),
        arch: arch.to_string(),
        antennas: n,
        users: k,
        samples: hs.len(),
        sum_rate: total / count,
        se_ratio,
        ee: None,
        ee_ratio: None,
        csr: None,
        per_user_rates: per_user,
        correlation_min: correlations.as_ref().map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)),
        correlation_median: correlations.as_deref().and_then(median),
        flops: None,
        wall_clock: 0.0,
    })
}
