use thiserror::Error;

use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::grid::GridError;
use crate::oracle::OracleError;
use crate::patch::PatchError;
use crate::synth::SynthError;
use crate::unet::{CheckpointError, UnetError};
use crate::xform::XformError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Xform(#[from] XformError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Network(#[from] UnetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing input {path}: {reason}")]
    Missing { path: std::path::PathBuf, reason: String },
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(ConfigError::Read { .. }) => ErrorClass::Io,
            Error::Config(_) | Error::Grid(_) | Error::Synth(_) => ErrorClass::Config,
            Error::Oracle(OracleError::InvalidParams(_)) => ErrorClass::Config,
            Error::Oracle(_) | Error::Xform(_) => ErrorClass::Numeric,
            Error::Patch(PatchError::Io(_)) => ErrorClass::Io,
            Error::Patch(PatchError::Indivisible { .. } | PatchError::BadDepth { .. } | PatchError::BadPolicy(_)) => ErrorClass::Config,
            Error::Patch(_) => ErrorClass::Data,
            Error::Network(UnetError::NonFiniteLoss { .. }) => ErrorClass::Numeric,
            Error::Network(UnetError::Shape { .. }) => ErrorClass::Data,
            Error::Network(_) => ErrorClass::Config,
            Error::Checkpoint(CheckpointError::Io(_)) => ErrorClass::Io,
            Error::Checkpoint(CheckpointError::ConfigMismatch { .. } | CheckpointError::Network(_)) => ErrorClass::Config,
            Error::Checkpoint(_) => ErrorClass::Data,
            Error::Eval(EvalError::Io(_)) => ErrorClass::Io,
            Error::Eval(EvalError::Domain(_)) => ErrorClass::Config,
            Error::Eval(EvalError::Network(UnetError::NonFiniteLoss { .. })) => ErrorClass::Numeric,
            Error::Eval(EvalError::Length { .. } | EvalError::Network(_)) => ErrorClass::Data,
            Error::Eval(_) => ErrorClass::Numeric,
            Error::Missing { .. } => ErrorClass::Data,
            Error::Io { .. } => ErrorClass::Io,
            Error::Json(_) => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
