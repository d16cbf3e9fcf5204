//! Exit-code classification and single-line error reporting.

use std::fmt;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Data = 3,
    Numeric = 4,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Numeric => "numeric",
        }
    }
}

/// A failure tagged with the module it came from.
#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub origin: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(origin: &'static str, message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, origin, message: message.into() }
    }

    pub fn data(origin: &'static str, message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Data, origin, message: message.into() }
    }
}

impl fmt::Display for CliError {
    /// `error kind=<kind> origin=<module>: <message>` on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "error kind={} origin={}: {}", self.kind.as_str(), self.origin, msg.trim())
    }
}

impl std::error::Error for CliError {}

fn classify(e: &gtloc::Error) -> ExitKind {
    match e {
        gtloc::Error::InvalidInput(_) => ExitKind::Usage,
        gtloc::Error::Numeric(_) => ExitKind::Numeric,
        gtloc::Error::Shape(_) | gtloc::Error::Data(_) | gtloc::Error::Checkpoint(_) | gtloc::Error::Io { .. } => {
            ExitKind::Data
        }
    }
}

/// Attaches an origin to library results.
pub trait At<T> {
    fn at(self, origin: &'static str) -> Result<T, CliError>;
}

impl<T> At<T> for gtloc::Result<T> {
    fn at(self, origin: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError { kind: classify(&e), origin, message: e.to_string() })
    }
}

impl<T> At<T> for std::io::Result<T> {
    fn at(self, origin: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::data(origin, e.to_string()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
