use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("angle out of range: {0}")]
    AngleOutOfRange(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite logit at {0}")]
    NonFiniteLogit(String),

    #[error("ground truth {gt} not representable at {channel}: {reason}")]
    Unrepresentable {
        gt: usize,
        channel: String,
        reason: String,
    },

    #[error("ground truth {0} has no orientation label")]
    MissingOrientation(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("duplicate label for annotation {0}")]
    DuplicateLabel(u64),

    #[error("{count} person instance(s) have no orientation label: {ids}")]
    Uncovered { count: usize, ids: String },

    #[error("label for annotation {annotation} names image {label_image}, annotation belongs to image {image}")]
    ImageMismatch {
        annotation: u64,
        label_image: u64,
        image: u64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {value}")]
    Diverged { step: usize, value: f64 },

    #[error("gradient check seed {seed}: no smooth point in {attempts} draws")]
    NoSmoothPoint { seed: u64, attempts: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Configuration and usage problems, as opposed to bad input data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidGrid(_))
    }
}
