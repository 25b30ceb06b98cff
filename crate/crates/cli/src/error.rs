use std::fmt;
use std::process::ExitCode;

use dsmt_core::Error;

/// Process exit codes.
pub mod code {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const TRAINING: u8 = 4;
    pub const IO: u8 = 5;
    pub const CHECK_FAILED: u8 = 6;
    pub const COMPATIBILITY: u8 = 7;
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(code::CONFIG, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(code::IO, message)
    }

    /// Any core error raised while validating counts as a config error.
    pub fn as_config(e: Error) -> Self {
        Self::config(e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parameter(_) => code::CONFIG,
            Error::Format { .. } | Error::Metadata(_) | Error::Shape(_) | Error::DegenerateTarget(_) | Error::Csv(_) => code::DATA,
            Error::Divergence { .. } => code::TRAINING,
            Error::Compatibility(_) => code::COMPATIBILITY,
            Error::Io(_) | Error::Json(_) => code::IO,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::io(e.to_string())
    }
}
