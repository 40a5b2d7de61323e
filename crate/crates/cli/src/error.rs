use std::io;
use std::path::PathBuf;

use ein_seld::checkpoint::CheckpointError;
use ein_seld::data::DataError;
use ein_seld::infer::InferError;
use ein_seld::metrics::MetricsError;
use ein_seld::model::ModelError;
use ein_seld::scene::SceneError;
use ein_seld::train::TrainError;
use thiserror::Error;

/// Exit status for bad input or configuration.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for runtime and numeric failures.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("output directory {0} is not empty (pass --force to write into it)")]
    NotEmpty(PathBuf),
    #[error("no clips found in {0}")]
    NoInput(PathBuf),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("self-check failed: {0}")]
    SelfCheck(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(serde_json::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        let invalid = match self {
            Self::Config(_) | Self::ConfigParse { .. } | Self::NotEmpty(_) | Self::NoInput(_) => true,
            Self::Scene(_) | Self::Data(_) => true,
            Self::Model(e) | Self::Infer(InferError::Model(e)) => matches!(e, ModelError::Config(_) | ModelError::Geometry(_)),
            Self::Train(TrainError::Config(_)) => true,
            Self::Checkpoint(e) => !matches!(e, CheckpointError::Io(_)),
            Self::Metrics(_) => true,
            _ => false,
        };
        if invalid {
            EXIT_INVALID
        } else {
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), EXIT_INVALID);
        assert_eq!(
            CliError::Checkpoint(CheckpointError::Version("bad magic".into())).exit_code(),
            EXIT_INVALID
        );
        let nf = TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            dump: None,
        };
        assert_eq!(CliError::Train(nf).exit_code(), EXIT_RUNTIME);
        assert_eq!(CliError::SelfCheck("x".into()).exit_code(), EXIT_RUNTIME);
    }
}
