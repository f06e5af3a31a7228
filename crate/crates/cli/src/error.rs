use std::fmt;
use std::io::ErrorKind;
use std::process::ExitCode;

use tutor_core::Error;

/// Process exit codes. Stable across versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    /// Runtime failure: I/O, network, training divergence.
    Failure = 1,
    /// Bad flags, bad config keys or values.
    Usage = 2,
    /// An input file does not exist.
    MissingFile = 3,
    /// An input file exists but cannot be parsed or has the wrong schema.
    BadFile = 4,
    /// `eval`: the policy did not pass the deployment gate.
    GateFailed = 5,
    /// `replay`: the tutor did not reproduce the logged feedback.
    ReplayDiverged = 6,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> Self {
        ExitCode::from(e as u8)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub exit: Exit,
    pub message: String,
}

impl CliError {
    pub fn new(exit: Exit, message: impl Into<String>) -> Self {
        Self {
            exit,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Exit::Usage, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => Exit::MissingFile,
            Error::Malformed { .. } | Error::Schema { .. } => Exit::BadFile,
            Error::InvalidArgument(_) => Exit::Usage,
            _ => Exit::Failure,
        };
        Self::new(exit, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
