//! Persisted channel collections.
//!
//! Binary layout (little-endian, 40-byte header):
//!
//! | offset | field                      |
//! |--------|----------------------------|
//! | 0      | magic `PGNN`               |
//! | 4      | version `u32` = 1          |
//! | 8      | cells `M` (`u32`)          |
//! | 12     | antennas `N` (`u32`)       |
//! | 16     | users `K` (`u32`)          |
//! | 20     | padding `u32` = 0          |
//! | 24     | samples `S` (`u64`)        |
//! | 32     | precision `u32` = 64       |
//! | 36     | reserved `u32` = 0         |
//!
//! followed by `S*M*M*N*K` entries of `(f64 re, f64 im)`, indexed
//! `[s][i][m][n][k]` with `k` fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;

use crate::error::{invalid, Error, Result};
use crate::linalg::ComplexMatrix;
use crate::scalar::Real;
use crate::scenario::MultiCellChannel;

pub const MAGIC: &[u8; 4] = b"PGNN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;
const PRECISION_BITS: u32 = 64;

/// Shape of one channel sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelDims {
    pub cells: usize,
    pub antennas: usize,
    pub users: usize,
}

impl ChannelDims {
    pub fn entries_per_sample(&self) -> usize {
        self.cells * self.cells * self.antennas * self.users
    }
}

/// Immutable collection of channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    dims: ChannelDims,
    data: Vec<Complex<f64>>,
}

impl ChannelDataset {
    pub fn new(dims: ChannelDims, data: Vec<Complex<f64>>) -> Result<Self> {
        let per = dims.entries_per_sample();
        if per == 0 {
            return Err(invalid("dataset dimensions must be positive"));
        }
        if !data.len().is_multiple_of(per) {
            return Err(invalid(format!("{} entries is not a multiple of {per}", data.len())));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("dataset entries must be finite"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ChannelDims {
        self.dims
    }

    pub fn samples(&self) -> usize {
        self.data.len() / self.dims.entries_per_sample()
    }

    pub fn as_slice(&self) -> &[Complex<f64>] {
        &self.data
    }

    /// Channel from BS `bs` to the users of cell `cell` in sample `s`.
    pub fn block<T: Real>(&self, s: usize, bs: usize, cell: usize) -> ComplexMatrix<T> {
        let ChannelDims { cells, antennas, users } = self.dims;
        let base = ((s * cells + bs) * cells + cell) * antennas * users;
        ComplexMatrix::from_fn(antennas, users, |n, k| {
            let z = self.data[base + n * users + k];
            Complex::new(T::lit(z.re), T::lit(z.im))
        })
    }

    /// Single-cell channel of sample `s` (cell 0 served by BS 0).
    pub fn channel<T: Real>(&self, s: usize) -> ComplexMatrix<T> {
        self.block(s, 0, 0)
    }

    pub fn channels<T: Real>(&self) -> Vec<ComplexMatrix<T>> {
        (0..self.samples()).map(|s| self.channel(s)).collect()
    }

    pub fn multicell<T: Real>(&self, s: usize) -> MultiCellChannel<T> {
        MultiCellChannel::from_fn(self.dims.cells, |i, m| self.block(s, i, m)).expect("consistent dims")
    }

    pub fn multicell_channels<T: Real>(&self) -> Vec<MultiCellChannel<T>> {
        (0..self.samples()).map(|s| self.multicell(s)).collect()
    }

    /// First `count` samples.
    pub fn truncate(&self, count: usize) -> Self {
        let per = self.dims.entries_per_sample();
        let keep = count.min(self.samples()) * per;
        Self { dims: self.dims, data: self.data[..keep].to_vec() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.cells as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.antennas as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.users as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.samples() as u64).to_le_bytes());
        out.extend_from_slice(&PRECISION_BITS.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for z in &self.data {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fmt(0, "bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(fmt(4, format!("unsupported version {version}")));
        }
        let dims = ChannelDims { cells: u32_at(8) as usize, antennas: u32_at(12) as usize, users: u32_at(16) as usize };
        for (o, v) in [(8, dims.cells), (12, dims.antennas), (16, dims.users)] {
            if v == 0 {
                return Err(fmt(o, "zero dimension".into()));
            }
        }
        let samples = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let precision = u32_at(32);
        if precision != PRECISION_BITS {
            return Err(fmt(32, format!("unsupported precision {precision}")));
        }
        let entries = (samples as u128) * dims.entries_per_sample() as u128;
        let expected = HEADER_LEN as u128 + entries * 16;
        if (bytes.len() as u128) < expected {
            return Err(fmt(bytes.len(), format!("payload truncated, expected {expected} bytes")));
        }
        if (bytes.len() as u128) > expected {
            return Err(fmt(expected as usize, "trailing bytes after payload".into()));
        }
        let mut data = Vec::with_capacity(entries as usize);
        for (idx, chunk) in bytes[HEADER_LEN..].chunks_exact(16).enumerate() {
            let re = f64::from_le_bytes(chunk[0..8].try_into().unwrap());
            let im = f64::from_le_bytes(chunk[8..16].try_into().unwrap());
            if !re.is_finite() || !im.is_finite() {
                return Err(fmt(HEADER_LEN + idx * 16, "non-finite entry".into()));
            }
            data.push(Complex::new(re, im));
        }
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
