//! Loss-landscape analysis of small quantized networks: surrogate models and
//! data, quantization-aware training, curvature, landscape scans,
//! representation similarity, mode connectivity and robustness sweeps.

pub mod cka;
pub mod corruption;
pub mod data;
pub mod error;
pub mod hessian;
pub mod landscape;
pub mod model;
pub mod modeconn;
pub mod quant;
pub mod regularize;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorKind, Result};
