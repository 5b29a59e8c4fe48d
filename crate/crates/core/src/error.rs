use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown op `{0}` (not in the catalogue)")]
    UnknownOp(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by op #{index} ({op}) during {phase}")]
    NonFinite {
        index: usize,
        op: &'static str,
        phase: &'static str,
    },

    #[error("op #{index} ({op}) does not support differentiating its input gradient")]
    UnsupportedDoubleBackprop { index: usize, op: &'static str },

    #[error("parameter error: {0}")]
    Param(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 1 config, 2 data/io, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::NonFinite { .. } => 3,
            Error::Data(_)
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::Io { .. } => 2,
            // Engine-level errors reaching the CLI mean the configuration asked
            // for something the engine cannot do.
            Error::Shape { .. }
            | Error::UnknownOp(_)
            | Error::Contract(_)
            | Error::UnsupportedDoubleBackprop { .. }
            | Error::Param(_) => 1,
        }
    }
}
