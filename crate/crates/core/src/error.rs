use std::path::PathBuf;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("missing joint `{0}`")]
    MissingJoint(&'static str),

    #[error("missing part `{0}`")]
    MissingPart(&'static str),

    #[error("shape mismatch in {what} for view {view}: {reason}")]
    ShapeMismatch {
        what: &'static str,
        view: usize,
        reason: String,
    },

    #[error("guard exceeded: {0}")]
    Guard(String),

    #[error("malformed {format}: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("plug-in failure: {0}")]
    Plugin(String),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
