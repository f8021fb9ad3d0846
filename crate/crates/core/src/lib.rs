//! Selective state-space shadow removal with cross-region gate modulation and
//! color-shift contrastive negatives.

pub mod colorshift;
pub mod crossgate;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod numerics;
pub mod shadowlab;
pub mod ssm;

pub use error::{Error, Result};
