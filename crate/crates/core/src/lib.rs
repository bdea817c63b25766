//! Conditional denoising diffusion for next-event prediction in limit order
//! book event streams, with ingestion, classical baselines, skip-step
//! sampling and evaluation tooling.

pub mod checkpoint;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod evalsuite;
pub mod error;
pub mod ingest;
pub mod model;
pub mod numcore;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
