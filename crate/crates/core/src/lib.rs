//! Learned and classical precoding for multi-user MISO downlinks.
//!
//! The crate covers Rayleigh channel generation, complex linear algebra with
//! the Taylor pseudo-inverse recursion, closed-form precoders, the WMMSE
//! sum-rate oracle, edge-GNN policies with a reverse-mode autodiff tape,
//! unsupervised training, and evaluation metrics. Numerical code is generic
//! over [`scalar::Real`]; the aliases below fix the scalar to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gnn;
pub mod linalg;
pub mod metrics;
pub mod precoders;
pub mod scalar;
pub mod scenario;
pub mod train;
pub mod wmmse;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::ComplexMatrix<f64>;
pub type MultiCell = scenario::MultiCellChannel<f64>;
pub type Precoder = precoders::PrecodingMatrix<f64>;
pub type Params = gnn::GnnParams<f64>;
pub type Adapter = gnn::ScaleAdapter<f64>;
pub type TrainData = train::TrainSet<f64>;
