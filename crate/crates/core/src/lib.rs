//! Source-free domain adaptation for semantic segmentation via a
//! label-conditioned image translator, at a scale that trains on one CPU core.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod labelops;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
