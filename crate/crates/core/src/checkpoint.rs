//! Binary parameter checkpoints.
//!
//! Layout, all little-endian: magic `PGNP`, version `u32`, architecture tag
//! `u32`, width count `u32`, widths as `u32`, then every weight matrix in
//! declaration order as `f64` with shapes implied by the widths. An optional
//! scale-adapter record (tag `4`, then its matrices) may follow.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gnn::{
    Activation, Arch, GnnParams, ModelLayer, ModelParams, MultiCellLayer, MultiCellModelParams, Pooling, ScaleAdapter,
    VanillaLayer, VanillaParams, ADAPTER_WIDTHS,
};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"PGNP";
pub const VERSION: u32 = 1;
const ADAPTER_TAG: u32 = 4;

/// Parameters restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: GnnParams<T>,
    pub adapter: Option<ScaleAdapter<T>>,
}

fn arch_code(a: Arch) -> u32 {
    match a {
        Arch::Vanilla => 1,
        Arch::Model => 2,
        Arch::ModelMulticell => 3,
    }
}

fn pooling_code(p: Pooling) -> u32 {
    match p {
        Pooling::Sum => 0,
        Pooling::Mean => 1,
        Pooling::Max => 2,
    }
}

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::WholeTensor => 0,
        Activation::PerEdge => 1,
        Activation::Identity => 2,
    }
}

/// Packs architecture, pooling, activation and the term-(c) flag.
pub fn arch_tag<T: Real>(params: &GnnParams<T>) -> u32 {
    let (pooling, activation, flag) = match params {
        GnnParams::Vanilla(p) => (p.pooling, p.activation, false),
        GnnParams::Model(p) => (Pooling::Sum, p.activation, p.has_term_c()),
        GnnParams::MultiCell(p) => (Pooling::Sum, p.activation, p.omit_nonneighbor),
    };
    arch_code(params.arch()) | pooling_code(pooling) << 8 | activation_code(activation) << 16 | (flag as u32) << 24
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_matrices<'a, T: Real + 'a>(out: &mut Vec<u8>, ms: impl IntoIterator<Item = &'a Array2<T>>) {
    for m in ms {
        for v in m.iter() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

pub fn to_bytes<T: Real>(params: &GnnParams<T>, adapter: Option<&ScaleAdapter<T>>) -> Result<Vec<u8>> {
    params.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, arch_tag(params));
    let widths = params.widths();
    push_u32(&mut out, widths.len() as u32);
    for &w in widths {
        push_u32(&mut out, u32::try_from(w).map_err(|_| crate::error::invalid("width exceeds u32"))?);
    }
    if let GnnParams::Model(p) = params {
        if p.layers.iter().any(|l| l.p1.is_some()) && !p.has_term_c() {
            return Err(crate::error::invalid("P1 must be present in every layer or none"));
        }
    }
    push_matrices(&mut out, params.tensors());
    if let Some(a) = adapter {
        a.validate()?;
        push_u32(&mut out, ADAPTER_TAG);
        push_matrices(&mut out, a.tensors());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Array2<T>> {
        let at = self.pos;
        let raw = self.take(rows * cols * 8)?;
        let values: Vec<T> = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format { offset: at as u64, message: "non-finite weight".into() });
        }
        Ok(Array2::from_shape_vec((rows, cols), values).unwrap())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let tag = r.u32()?;
    let pooling = match (tag >> 8) & 0xff {
        0 => Pooling::Sum,
        1 => Pooling::Mean,
        2 => Pooling::Max,
        c => return Err(r.err(format!("unknown pooling code {c}"))),
    };
    let activation = match (tag >> 16) & 0xff {
        0 => Activation::WholeTensor,
        1 => Activation::PerEdge,
        2 => Activation::Identity,
        c => return Err(r.err(format!("unknown activation code {c}"))),
    };
    let flag = (tag >> 24) & 0xff == 1;
    let count = r.u32()? as usize;
    if !(2..=4096).contains(&count) {
        return Err(r.err(format!("implausible width count {count}")));
    }
    let widths = (0..count).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = widths.windows(2).map(|p| (p[1], p[0])).collect();
    let params = match tag & 0xff {
        1 => {
            let mut layers = Vec::new();
            for &(o, i) in &pairs {
                layers.push(VanillaLayer { s: r.matrix(o, i)?, p: r.matrix(o, i)?, q: r.matrix(o, i)? });
            }
            GnnParams::Vanilla(VanillaParams { widths, pooling, activation, layers })
        }
        2 => {
            let mut layers = Vec::new();
            for &(o, i) in &pairs {
                layers.push(ModelLayer {
                    s0: r.matrix(o, i)?,
                    s1: r.matrix(o, i)?,
                    p0: r.matrix(o, i)?,
                    q0: r.matrix(o, i)?,
                    q1: r.matrix(o, i)?,
                    p1: if flag { Some(r.matrix(o, i)?) } else { None },
                });
            }
            GnnParams::Model(ModelParams { widths, activation, layers })
        }
        3 => {
            let mut layers = Vec::new();
            for &(o, i) in &pairs {
                layers.push(MultiCellLayer {
                    s: r.matrix(o, 2 * i)?,
                    p_a: r.matrix(o, 2 * i)?,
                    p_r: r.matrix(o, 2 * i)?,
                    q_a: r.matrix(o, 2 * i)?,
                    q_r: r.matrix(o, 2 * i)?,
                });
            }
            GnnParams::MultiCell(MultiCellModelParams { widths, activation, omit_nonneighbor: flag, layers })
        }
        c => return Err(r.err(format!("unknown architecture code {c}"))),
    };
    params.validate().map_err(|e| r.err(e.to_string()))?;
    let adapter = if r.done() {
        None
    } else {
        let tag = r.u32()?;
        if tag != ADAPTER_TAG {
            return Err(r.err(format!("unknown trailing record {tag}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for p in ADAPTER_WIDTHS.windows(2) {
            weights.push(r.matrix(p[1], p[0])?);
            biases.push(r.matrix(1, p[1])?);
        }
        Some(ScaleAdapter { weights, biases })
    };
    if !r.done() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint { params, adapter })
}

pub fn save<T: Real>(path: impl AsRef<Path>, params: &GnnParams<T>, adapter: Option<&ScaleAdapter<T>>) -> Result<()> {
    std::fs::write(path, to_bytes(params, adapter)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_bytes(&std::fs::read(path)?)
}
