use std::fmt;
use std::io;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the data pipeline, network and I/O layers.
#[derive(Debug)]
pub enum Error {
    /// A tensor operation received incompatible shapes.
    ShapeMismatch { context: String },
    /// A parameter or input value violates an operation's contract.
    InvalidArgument { context: String },
    /// A non-finite value (NaN/Inf) was produced where the contract forbids it.
    NonFinite { context: String },
    /// A spectrogram excerpt was requested before enough left context exists.
    /// Callers are expected to skip such notes rather than fail.
    ExcerptTooEarly { onset_frame: usize, needed: usize },
    /// A staff cannot hold the requested notes; `fits` notes would fit.
    StaffOverflow { requested: usize, fits: usize },
    /// Wrapper around I/O failures, with the offending path.
    Io { path: PathBuf, source: io::Error },
    /// A file exists but its contents are not what we expect.
    Format { path: PathBuf, context: String },
}

impl Error {
    pub fn shape(context: impl Into<String>) -> Self {
        Error::ShapeMismatch { context: context.into() }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidArgument { context: context.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, context: impl Into<String>) -> Self {
        Error::Format { path: path.into(), context: context.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context } => write!(f, "shape mismatch: {context}"),
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::ExcerptTooEarly { onset_frame, needed } => write!(
                f,
                "excerpt too early: onset frame {onset_frame} needs at least {needed} frames of left context"
            ),
            Error::StaffOverflow { requested, fits } => {
                write!(f, "staff overflow: {requested} notes requested, {fits} fit")
            }
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Format { path, context } => {
                write!(f, "bad file format in {}: {context}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
