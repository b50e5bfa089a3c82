//! Multi-agent trajectory forecasting with an autoregressive joint latent model.
//!
//! Scene data and a synthetic interaction generator, the model and its
//! training loop, sampling, and the evaluation and analysis tools.

pub mod analysis;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scene;
pub mod synthgen;
pub mod training;
