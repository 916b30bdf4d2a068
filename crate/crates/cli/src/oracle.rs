//! WMMSE reference precoders, cached on disk by dataset content hash.

use std::path::{Path, PathBuf};

use precoding_gnn::dataset::{ChannelDataset, ChannelDims};
use precoding_gnn::wmmse::{wmmse_p1, wmmse_p2, WmmseOptions};
use precoding_gnn::{Matrix, MultiCell};
use sha2::{Digest, Sha256};

use crate::error::CliResult;

/// Hex SHA-256 over the dataset bytes and every solver input.
pub fn cache_key(dataset: &ChannelDataset, p_max: f64, sigma2: f64, opts: &WmmseOptions) -> String {
    let mut h = Sha256::new();
    h.update(dataset.to_bytes());
    h.update(p_max.to_le_bytes());
    h.update(sigma2.to_le_bytes());
    h.update(serde_json::to_vec(opts).expect("options serialize"));
    hex::encode(h.finalize())
}

/// Oracle precoders, one per BS per sample, and whether the cache answered.
pub struct OracleSolution {
    pub precoders: Vec<Vec<Matrix>>,
    pub cached: bool,
    pub path: PathBuf,
}

/// Solves or loads the WMMSE precoders of `dataset`. The cache file reuses
/// the dataset format with one single-cell record per (sample, BS).
pub fn wmmse_cached(
    dataset: &ChannelDataset,
    p_max: f64,
    sigma2: f64,
    opts: &WmmseOptions,
    cache_dir: &Path,
) -> CliResult<OracleSolution> {
    let dims = dataset.dims();
    let path = cache_dir.join(format!("{}.wmmse", cache_key(dataset, p_max, sigma2, opts)));
    if let Ok(stored) = ChannelDataset::read(&path) {
        let expected = ChannelDims { cells: 1, ..dims };
        if stored.dims() == expected && stored.samples() == dataset.samples() * dims.cells {
            let flat = stored.channels::<f64>();
            let precoders = flat.chunks(dims.cells).map(|c| c.to_vec()).collect();
            return Ok(OracleSolution { precoders, cached: true, path });
        }
    }
    let channels: Vec<MultiCell> = dataset.multicell_channels();
    let precoders = channels
        .iter()
        .map(|h| {
            let sol = if dims.cells == 1 { wmmse_p1(h.block(0, 0), p_max, sigma2, opts)? } else { wmmse_p2(h, p_max, sigma2, opts)? };
            Ok(sol.precoders.into_iter().map(|p| p.into_matrix()).collect::<Vec<_>>())
        })
        .collect::<precoding_gnn::Result<Vec<Vec<Matrix>>>>()?;
    let data = precoders.iter().flatten().flat_map(|m| m.as_slice().iter().copied()).collect();
    std::fs::create_dir_all(cache_dir)?;
    ChannelDataset::new(ChannelDims { cells: 1, ..dims }, data)?.write(&path)?;
    Ok(OracleSolution { precoders, cached: false, path })
}
