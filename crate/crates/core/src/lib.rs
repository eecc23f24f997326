//! Video platform-provenance pipeline: frame residuals and patches, sidecar
//! ingest with leak-free splits, the Ind/Pred/MultiFrame stream networks,
//! training and evaluation, and a synthetic double-compression generator.

pub mod artifacts;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod preprocess;
pub mod store;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
