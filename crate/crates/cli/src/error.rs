use std::fmt;
use std::path::Path;

use lamo::arch::ModelError;
use lamo::config::ConfigError;
use lamo::data::DataError;
use lamo::train::TrainError;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            msg: format!("{}: {err}", path.display()),
        }
    }

    pub fn verify(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VERIFY,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Contract(_) => EXIT_USAGE,
            DataError::NoConvergence { .. } => EXIT_NUMERIC,
            DataError::Tensor(_) => EXIT_USAGE,
            // Unreadable or malformed input files.
            DataError::Format(_) => EXIT_IO,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match &e {
            ModelError::Format(_) => EXIT_IO,
            _ => EXIT_USAGE,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            TrainError::Io { .. } => EXIT_IO,
            TrainError::Model(ModelError::Format(_)) => EXIT_IO,
            _ => EXIT_USAGE,
        };
        CliError { code, msg: e.to_string() }
    }
}
