//! On-device style deep Bayesian active learning for accelerometer activity
//! recognition.
//!
//! The crate trains a small convolutional classifier with dropout, estimates
//! predictive uncertainty with repeated stochastic forward passes, ranks
//! unlabeled windows by acquisition functions, and fine-tunes the model on
//! the windows an oracle labels.
//!
//! Module map:
//!
//! * [`nn`]: tensors, layers with exact gradients, Adam.
//! * [`model`]: the HARNet architecture and its binary bundle format.
//! * [`signal`]: windowing, decimation and Haar approximation coefficients.
//! * [`acquire`]: MC-dropout predictions and acquisition functions.
//! * [`data`]: manifests, CSV ingestion, the synthetic corpus, window stores.
//! * [`active`]: experiment protocols (baselines, incremental rounds, sweeps, timing).
//! * [`oracle`]: label tasks and the simulated oracle.
//! * [`config`]: the run configuration tree.

pub mod acquire;
pub mod active;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod signal;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{HarnetConfig, ModelBundle};
pub use rng::RngStream;
