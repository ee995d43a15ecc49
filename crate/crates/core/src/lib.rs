//! Joint low-light image compression and enhancement.

pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod snr;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
