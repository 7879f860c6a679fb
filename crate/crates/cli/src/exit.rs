//! Exit codes and the machine-readable error line.
//!
//! Every failure prints one final stderr line of the form
//!
//! ```text
//! error: code=<name> exit=<n> msg=<single-line message>
//! ```

use expertlab::Error;

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad flags or flag combinations.
    Usage,
    /// A file could not be read or written.
    Io,
    /// A file has an unsupported format version.
    Version,
    /// A file's checksum does not match its contents.
    Checksum,
    /// A file is not in the expected format or is internally inconsistent.
    Format,
    /// Inputs are well-formed but cannot be used together or are out of range.
    Invalid,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 2,
            ExitKind::Io => 3,
            ExitKind::Version => 4,
            ExitKind::Checksum => 5,
            ExitKind::Format => 6,
            ExitKind::Invalid => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Io => "io",
            ExitKind::Version => "version",
            ExitKind::Checksum => "checksum",
            ExitKind::Format => "format",
            ExitKind::Invalid => "invalid",
        }
    }
}

/// A command failure tagged with its exit kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Failure { kind, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(ExitKind::Usage, message)
    }

    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("error: code={} exit={} msg={}", self.kind.name(), self.kind.code(), msg.trim())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Io { .. } => ExitKind::Io,
            Error::VersionMismatch { .. } => ExitKind::Version,
            Error::Checksum { .. } => ExitKind::Checksum,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::Malformed { .. } | Error::Json(_) | Error::Csv(_) => {
                ExitKind::Format
            }
            Error::InvalidConfig(_)
            | Error::DimensionMismatch(_)
            | Error::TooFewExperts { .. }
            | Error::NonFinite { .. }
            | Error::InvalidArgument(_)
            | Error::HeaderMismatch(_)
            | Error::SearchTooLarge(_)
            | Error::UnknownSample(_) => ExitKind::Invalid,
        };
        Failure::new(kind, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::Usage(_) => ExitKind::Usage,
            ConfigError::Io { .. } => ExitKind::Io,
            ConfigError::Parse { .. } => ExitKind::Format,
        };
        Failure::new(kind, format!("config: {e}"))
    }
}
