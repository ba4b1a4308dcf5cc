use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{op}: contract violation: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("input spatial extents {height}x{width} must be divisible by {divisor}")]
    Divisibility {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("backward already ran on this recording; re-run the forward pass first")]
    BackwardTwice,

    #[error("backward needs a scalar loss, got {0} elements")]
    NonScalarLoss(usize),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite training loss {0}")]
    NonFiniteLoss(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset too small: need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("missing ground truth for `{0}`")]
    MissingGroundTruth(String),

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("`{0}` is not in the expert queue")]
    NotQueued(String),

    #[error("empty evaluation set")]
    EmptyEvaluationSet,

    #[error("degenerate pairing: all paired differences are zero")]
    DegeneratePairing,

    #[error("{0}")]
    Dataset(String),

    #[error("cannot decode `{path}`: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
