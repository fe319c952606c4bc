use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("non-finite value produced at `{tensor}`")]
    NumericFailure { tensor: String },

    #[error("sequence of {len} positions exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("unknown token {0}")]
    UnknownToken(String),

    #[error("invalid decode configuration: {0}")]
    DecodeConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("integrity check failed for `{0}`")]
    Integrity(String),

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("corpus does not match stage {stage}: {reason}")]
    CorpusMismatch { stage: u8, reason: String },

    #[error("stage {stage} needs a checkpoint from stage {needed} or later, got stage {found}")]
    StageOrder { stage: u8, needed: u8, found: u8 },

    #[error("{0} evaluation records also appear in the training manifests")]
    Contamination(usize),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
