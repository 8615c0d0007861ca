//! People counting on 8x8 infrared frames with tiny CNN families.

pub mod baseline;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod explorer;
pub mod metrics;
pub mod modelfile;
pub mod nn;
pub mod quant;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};
