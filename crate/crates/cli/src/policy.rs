//! Learned or closed-form precoding policies behind one interface.

use precoding_gnn::gnn::{Arch, GnnParams, ScaleAdapter};
use precoding_gnn::metrics::{flop_count, FlopArch};
use precoding_gnn::precoders::{power_normalize, structured_precoder, Baseline};
use precoding_gnn::train::policy_precoders;
use precoding_gnn::{Matrix, MultiCell};

use crate::config::ArchName;
use crate::error::{usage, CliResult};

pub enum Policy {
    Learned { params: GnnParams<f64>, adapter: Option<ScaleAdapter<f64>> },
    Baseline(Baseline),
    /// Optimal-structure evaluator with uniform multipliers `p_max / K`.
    Structured,
}

impl Policy {
    pub fn baseline(name: ArchName, tgnn_iterations: usize) -> Option<Self> {
        Some(match name {
            ArchName::Mrt => Policy::Baseline(Baseline::Mrt),
            ArchName::Zfbf => Policy::Baseline(Baseline::Zfbf),
            ArchName::Rzf => Policy::Baseline(Baseline::Rzf),
            ArchName::Tgnn => Policy::Baseline(Baseline::Tgnn { iterations: tgnn_iterations }),
            ArchName::BnnStructured => Policy::Structured,
            _ => return None,
        })
    }

    /// Checks that the policy can serve `cells`-cell channels.
    pub fn check_cells(&self, cells: usize) -> CliResult<()> {
        match self {
            Policy::Learned { params, .. } if params.arch() != Arch::ModelMulticell && cells != 1 => Err(usage(format!(
                "{:?} checkpoint serves single-cell channels, dataset has {cells} cells",
                params.arch()
            ))),
            _ => Ok(()),
        }
    }

    /// Precoders at budget `p_max`, one per BS. Closed-form policies serve
    /// each BS from its own-cell channel block.
    pub fn precode(&self, hs: &[MultiCell], p_max: f64, sigma2: f64) -> CliResult<Vec<Vec<Matrix>>> {
        match self {
            Policy::Learned { params, adapter } => {
                let scale = (p_max / sigma2).sqrt();
                let scaled: Vec<MultiCell> = hs.iter().map(|h| h.scale(scale)).collect();
                let vs = policy_precoders(params, adapter.as_ref(), &scaled)?;
                Ok(vs.into_iter().map(|v| v.into_iter().map(|m| m.scale(p_max.sqrt())).collect()).collect())
            }
            Policy::Baseline(b) => Ok(per_cell(hs, |h| Ok(b.precode(h, p_max, sigma2)?.into_matrix()))?),
            Policy::Structured => Ok(per_cell(hs, |h| {
                let share = vec![p_max / h.cols() as f64; h.cols()];
                let raw = structured_precoder(h, &share, &share, sigma2, p_max)?;
                Ok(power_normalize(&raw, p_max)?.into_matrix())
            })?),
        }
    }

    pub fn flops(&self, n: usize, k: usize) -> Option<u128> {
        match self {
            Policy::Learned { params, .. } => {
                let arch = match params.arch() {
                    Arch::Vanilla => FlopArch::Vanilla,
                    Arch::Model => FlopArch::Model,
                    Arch::ModelMulticell => return None,
                };
                flop_count(arch, n, k, params.widths()).ok()
            }
            _ => None,
        }
    }
}

fn per_cell(hs: &[MultiCell], f: impl Fn(&Matrix) -> precoding_gnn::Result<Matrix>) -> precoding_gnn::Result<Vec<Vec<Matrix>>> {
    hs.iter().map(|h| (0..h.cells()).map(|m| f(h.block(m, m))).collect()).collect()
}
