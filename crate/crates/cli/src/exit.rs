//! Error type carrying the process exit code.

use std::fmt;

use selflabel::Error;

pub const EXIT_IO: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::DimensionMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::Infeasible(_)
            | Error::TooLarge(_) => EXIT_USAGE,
            Error::NonFiniteDual { .. } => EXIT_NOT_CONVERGED,
            Error::NotANumber { .. }
            | Error::NonFinite { .. }
            | Error::Format(_)
            | Error::Io(_)
            | Error::Json(_) => EXIT_IO,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: err.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError {
            code: EXIT_IO,
            message: err.to_string(),
        }
    }
}

/// Attaches a path or step to the message without changing the exit code.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| {
            let mut err: CliError = e.into();
            err.message = format!("{what}: {}", err.message);
            err
        })
    }
}
