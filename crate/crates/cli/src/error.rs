use std::fmt;
use std::process::ExitCode;

/// A failure with the process exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad config, malformed CSV, missing roles or schema mismatch: exit 2.
    Input,
    /// The estimation itself failed: exit 1.
    Runtime,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Runtime,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Input => 2,
            ErrorKind::Runtime => 1,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ivcate::Error> for CliError {
    fn from(err: ivcate::Error) -> Self {
        CliError::runtime(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Wrap an I/O failure on `path` as a runtime error.
pub fn io_error(path: &std::path::Path, err: impl fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {err}", path.display()))
}
