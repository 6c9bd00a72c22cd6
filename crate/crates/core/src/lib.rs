//! Multi-instance image editing with rectified flow and instance-disentangled attention.

pub mod encoder;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
