//! Error type shared by every engine module.

use std::fmt;

/// Coarse grouping of errors, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    /// File access and container decoding.
    Io,
    /// Shape, bounds and data-layout violations.
    Invariant,
    /// Degenerate numerics (zero norms, bad temperatures, non-finite values).
    Numeric,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Io => 3,
            ErrorFamily::Invariant => 4,
            ErrorFamily::Numeric => 5,
        }
    }
}

impl fmt::Display for ErrorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ErrorFamily::Io => "io",
            ErrorFamily::Invariant => "invariant",
            ErrorFamily::Numeric => "numeric",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checksum failure: {0}")]
    ChecksumFail(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
    #[error("missing group: class {class} ({class_name}), shot {shot}")]
    MissingGroup {
        class: usize,
        class_name: String,
        shot: usize,
    },
    #[error("insufficient views: {0}")]
    InsufficientViews(String),
    #[error("empty bundle: {0}")]
    EmptyBundle(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::ChecksumFail(_) => ErrorFamily::Io,
            Error::ZeroNorm(_) | Error::NonFinite(_) | Error::NonPositiveTemperature(_) => {
                ErrorFamily::Numeric
            }
            Error::DimensionMismatch(_)
            | Error::InvariantViolation(_)
            | Error::MissingGroup { .. }
            | Error::InsufficientViews(_)
            | Error::EmptyBundle(_)
            | Error::LengthMismatch(_)
            | Error::InvalidConfig(_) => ErrorFamily::Invariant,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family().exit_code()
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroNorm(_) => "ZeroNorm",
            Error::NonFinite(_) => "NonFinite",
            Error::NonPositiveTemperature(_) => "NonPositiveTemperature",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::BadMagic { .. } => "BadMagic",
            Error::VersionMismatch { .. } => "VersionMismatch",
            Error::ChecksumFail(_) => "ChecksumFail",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::MissingGroup { .. } => "MissingGroup",
            Error::InsufficientViews(_) => "InsufficientViews",
            Error::EmptyBundle(_) => "EmptyBundle",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
