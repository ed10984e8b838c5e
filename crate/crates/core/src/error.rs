use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report. Variants that come from file parsing
/// carry enough location to find the offending byte, row, or record.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("format error in {}: at byte {offset}: {message}", file.display())]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unknown {kind} `{name}`")]
    Lookup { kind: &'static str, name: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data leak: sample {sample} has relation `{relation}` outside the training split")]
    DataLeak { sample: usize, relation: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Format { .. } => "format",
            Error::Validation(_) => "validation",
            Error::Lookup { .. } => "lookup",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::DataLeak { .. } => "data_leak",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
        }
    }

    /// Whether the error is a rejected input (as opposed to a usage or
    /// environment problem). The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Validation(_)
                | Error::Lookup { .. }
                | Error::DataLeak { .. }
                | Error::Dimension { .. }
        )
    }
}
