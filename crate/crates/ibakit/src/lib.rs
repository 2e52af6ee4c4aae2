//! Information-bottleneck attribution for a small transformer text classifier,
//! with integrated-gradients, LIME-lite, and random baselines, plus the
//! degradation-test evaluation protocol.

pub mod attribution;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod iba;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};

/// Tool version string embedded in every output artifact.
pub const VERSION: &str = concat!("ibakit ", env!("CARGO_PKG_VERSION"));
