//! Simulator for trilinear compute-in-memory attention on double-gate
//! FeFET crossbars, with a bilinear baseline, a digital SFU and a cost model.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod config;
pub mod cost;
pub mod crossbar;
pub mod device;
pub mod error;
pub mod oracle;
pub mod quant;
pub mod rng;
pub mod sfu;
pub mod tensor;
pub mod trace;
pub mod verify;

pub use error::{Error, FitError, Result};
pub use tensor::Matrix;
