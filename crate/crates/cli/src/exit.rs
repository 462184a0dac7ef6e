//! Process exit codes.

use std::fmt;
use std::process::ExitCode;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NUMERICAL: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    /// Unreadable, unwritable or malformed files.
    Io(String),
    /// Training diverged.
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => USAGE,
            CliError::Io(_) => IO,
            CliError::Numerical(_) => NUMERICAL,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<conmh::Error> for CliError {
    fn from(e: conmh::Error) -> Self {
        use conmh::Error as E;
        let msg = e.to_string();
        match e {
            E::Argument(_) | E::Config(_) | E::Evaluation(_) => CliError::Usage(msg),
            E::Format { .. } | E::Io { .. } => CliError::Io(msg),
            E::Numerical(_) => CliError::Numerical(msg),
        }
    }
}
