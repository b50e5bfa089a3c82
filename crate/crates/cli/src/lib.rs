//! Command-line pipeline: generate, train, predict, evaluate, stats and the
//! end-to-end ablation run.

pub mod commands;
pub mod config;
pub mod experiment;

use jointcvae::inference::InferenceError;
use jointcvae::metrics::MetricError;
use jointcvae::model::ModelError;
use jointcvae::scene::SceneError;
use jointcvae::training::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    /// Single-line report: `error kind=<kind> code=<n> msg=<text>`.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} code={} msg={}", self.kind(), self.exit_code(), msg)
    }

    pub fn io(what: &str, path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{what} {}: {e}", path.display()))
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numeric(_) => CliError::Numeric(e.to_string()),
            ModelError::InvalidConfig(_) | ModelError::UnknownVariant(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Model(m) => m.into(),
            InferenceError::NoSamples => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            TrainError::EmptyTrain => CliError::Data(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Inference(i) => i.into(),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonIntegralHorizon { .. } | MetricError::HorizonTooLong { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
