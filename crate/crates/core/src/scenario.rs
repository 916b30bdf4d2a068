//! System scenarios, Rayleigh channel sampling, SNR input scaling and the
//! user-count distributions used for generalization experiments.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelDataset, ChannelDims};
use crate::error::{invalid, Result};
use crate::linalg::ComplexMatrix;
use crate::scalar::Real;

/// System dimensions and power budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "one")]
    pub cells: usize,
    pub antennas_per_bs: usize,
    pub users_per_cell: usize,
    #[serde(default = "unit")]
    pub p_max: f64,
    #[serde(default = "unit")]
    pub sigma2: f64,
    /// When set, overrides `p_max = 1` and `sigma2 = 10^(-snr/10)`.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

impl ScenarioConfig {
    pub fn single_cell(antennas: usize, users: usize) -> Self {
        Self { cells: 1, antennas_per_bs: antennas, users_per_cell: users, p_max: 1.0, sigma2: 1.0, snr_db: None, seed: 0 }
    }

    pub fn multi_cell(cells: usize, antennas: usize, users: usize) -> Self {
        Self { cells, ..Self::single_cell(antennas, users) }
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.snr_db = Some(snr_db);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.antennas_per_bs == 0 || self.users_per_cell == 0 {
            return Err(invalid("cells, antennas_per_bs and users_per_cell must be >= 1"));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(invalid("snr_db must be finite"));
            }
        } else if !(self.p_max > 0.0) || !(self.sigma2 > 0.0) {
            return Err(invalid("p_max and sigma2 must be positive"));
        }
        Ok(())
    }

    /// `(p_max, sigma2)` after resolving `snr_db`.
    pub fn power(&self) -> (f64, f64) {
        match self.snr_db {
            Some(snr) => (1.0, snr_db_to_sigma2(snr)),
            None => (self.p_max, self.sigma2),
        }
    }

    pub fn dims(&self) -> ChannelDims {
        ChannelDims { cells: self.cells, antennas: self.antennas_per_bs, users: self.users_per_cell }
    }
}

/// Noise power that realizes `snr_db` with a unit power budget.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One CN(0, 1) draw: independent real and imaginary parts of variance 1/2.
pub fn complex_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> Complex<T> {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex::new(T::lit(re * s), T::lit(im * s))
}

/// Random stream for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws `count` i.i.d. CN(0,1) channel tensors. Each sample uses its own
/// random stream, so sample `s` is independent of `count`.
pub fn sample_channel(config: &ScenarioConfig, count: usize) -> Result<ChannelDataset> {
    config.validate()?;
    let dims = config.dims();
    let per = dims.entries_per_sample();
    let mut data = Vec::with_capacity(per * count);
    for s in 0..count {
        let mut rng = sample_rng(config.seed, s as u64);
        data.extend((0..per).map(|_| complex_normal::<f64, _>(&mut rng)));
    }
    ChannelDataset::new(dims, data)
}

/// Draws one `n x k` CN(0,1) matrix.
pub fn random_channel<T: Real, R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> ComplexMatrix<T> {
    ComplexMatrix::from_fn(n, k, |_, _| complex_normal(rng))
}

/// Multiplies every entry by `sqrt(p_max / sigma2)`, the input scaling that
/// lets one network operate across SNRs.
pub fn apply_snr_scaling<T: Real>(h: &ComplexMatrix<T>, p_max: T, sigma2: T) -> Result<ComplexMatrix<T>> {
    if !(p_max > T::zero()) || !(sigma2 > T::zero()) {
        return Err(invalid("p_max and sigma2 must be positive"));
    }
    Ok(h.scale((p_max / sigma2).sqrt()))
}

/// Distribution of the number of users per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserCountDistribution {
    Fixed { users: usize },
    /// Rounded exponential draw, clamped to at least two users.
    Exponential { mean: f64 },
    /// Integer uniform on `lo..=hi`.
    Uniform { lo: usize, hi: usize },
}

impl UserCountDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Fixed { users: 0 } => Err(invalid("fixed user count must be >= 1")),
            Self::Exponential { mean } if !(mean > 0.0) || !mean.is_finite() => {
                Err(invalid("exponential mean must be positive"))
            }
            Self::Uniform { lo, hi } if lo == 0 || lo > hi => Err(invalid("uniform range needs 1 <= lo <= hi")),
            _ => Ok(()),
        }
    }
}

pub const MIN_EXPONENTIAL_USERS: usize = 2;

pub fn sample_user_count<R: Rng + ?Sized>(dist: &UserCountDistribution, rng: &mut R) -> Result<usize> {
    dist.validate()?;
    Ok(match *dist {
        UserCountDistribution::Fixed { users } => users,
        UserCountDistribution::Exponential { mean } => {
            let exp = Exp::new(1.0 / mean).map_err(|e| invalid(e.to_string()))?;
            let x: f64 = exp.sample(rng);
            (x.round() as usize).max(MIN_EXPONENTIAL_USERS)
        }
        UserCountDistribution::Uniform { lo, hi } => rng.gen_range(lo..=hi),
    })
}

/// Single-cell channels with a per-sample user count.
pub fn sample_variable_users<T: Real>(
    antennas: usize,
    dist: &UserCountDistribution,
    count: usize,
    seed: u64,
) -> Result<Vec<ComplexMatrix<T>>> {
    dist.validate()?;
    if antennas == 0 {
        return Err(invalid("antennas must be >= 1"));
    }
    (0..count)
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64);
            let k = sample_user_count(dist, &mut rng)?;
            Ok(random_channel(antennas, k, &mut rng))
        })
        .collect()
}

/// Channels of a coordinated multi-cell system. Block `(i, m)` holds the
/// `N x K` channel from base station `i` to the users of cell `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCellChannel<T> {
    cells: usize,
    blocks: Vec<ComplexMatrix<T>>,
}

impl<T: Real> MultiCellChannel<T> {
    pub fn new(cells: usize, blocks: Vec<ComplexMatrix<T>>) -> Result<Self> {
        if cells == 0 || blocks.len() != cells * cells {
            return Err(invalid(format!("{cells} cells need {} blocks, got {}", cells * cells, blocks.len())));
        }
        let shape = blocks[0].shape();
        if blocks.iter().any(|b| b.shape() != shape) {
            return Err(invalid("multi-cell blocks must share one shape"));
        }
        Ok(Self { cells, blocks })
    }

    pub fn from_fn(cells: usize, mut f: impl FnMut(usize, usize) -> ComplexMatrix<T>) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cells * cells);
        for i in 0..cells {
            for m in 0..cells {
                blocks.push(f(i, m));
            }
        }
        Self::new(cells, blocks)
    }

    pub fn random<R: Rng + ?Sized>(cells: usize, antennas: usize, users: usize, rng: &mut R) -> Result<Self> {
        Self::from_fn(cells, |_, _| random_channel(antennas, users, rng))
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn antennas(&self) -> usize {
        self.blocks[0].rows()
    }

    pub fn users(&self) -> usize {
        self.blocks[0].cols()
    }

    /// Channel from BS `bs` to the users of cell `cell`.
    pub fn block(&self, bs: usize, cell: usize) -> &ComplexMatrix<T> {
        &self.blocks[bs * self.cells + cell]
    }

    /// Channel from BS `bs` to every user of every cell, `N x MK`, with
    /// users ordered cell-major.
    pub fn bs_row(&self, bs: usize) -> ComplexMatrix<T> {
        let (n, k) = (self.antennas(), self.users());
        ComplexMatrix::from_fn(n, self.cells * k, |r, c| self.block(bs, c / k)[(r, c % k)])
    }

    /// Channel seen by the users of `cell` from every antenna of every BS,
    /// `MN x K`.
    pub fn cell_column(&self, cell: usize) -> ComplexMatrix<T> {
        let n = self.antennas();
        ComplexMatrix::from_fn(self.cells * n, self.users(), |r, c| self.block(r / n, cell)[(r % n, c)])
    }

    /// Every antenna against every user, `MN x MK`; row `i N + n`, column
    /// `m K + k`.
    pub fn grid(&self) -> ComplexMatrix<T> {
        let (n, k) = (self.antennas(), self.users());
        let m = self.cells;
        ComplexMatrix::from_fn(m * n, m * k, |r, c| self.block(r / n, c / k)[(r % n, c % k)])
    }

    /// Wraps a single-cell channel.
    pub fn single(h: ComplexMatrix<T>) -> Self {
        Self { cells: 1, blocks: vec![h] }
    }

    pub fn scale(&self, s: T) -> Self {
        Self { cells: self.cells, blocks: self.blocks.iter().map(|b| b.scale(s)).collect() }
    }

    /// Relabels cells, antennas at every BS and users in every cell.
    /// `cell_perm[c]` is the source cell of output cell `c`.
    pub fn permute(&self, cell_perm: &[usize], antenna_perms: &[Vec<usize>], user_perms: &[Vec<usize>]) -> Self {
        let m = self.cells;
        let blocks = (0..m * m)
            .map(|idx| {
                let (i, c) = (idx / m, idx % m);
                let (si, sc) = (cell_perm[i], cell_perm[c]);
                self.block(si, sc).permute(&antenna_perms[i], &user_perms[c])
            })
            .collect();
        Self { cells: m, blocks }
    }

    pub fn cast<U: Real>(&self) -> MultiCellChannel<U> {
        MultiCellChannel { cells: self.cells, blocks: self.blocks.iter().map(|b| b.cast()).collect() }
    }
}
