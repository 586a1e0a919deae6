use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("text is empty after whitespace normalization")]
    EmptyText,
    #[error("clip has {frames} frames but the model supports at most {max}")]
    TooManyFrames { frames: usize, max: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    BadToken { id: usize, vocab_size: usize },
    #[error("projected embedding has zero norm")]
    DegenerateEmbedding,
    #[error("similarity matrix contains a non-finite value")]
    InvalidSimilarity,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("a batch of one has no in-batch negative")]
    NoNegativeAvailable,
    #[error("matching logit is not finite")]
    InvalidLogit,
    #[error("sequence has no maskable position")]
    NothingToMask,
    #[error("masked-position set is empty")]
    EmptyMaskSet,
    #[error("loss component is not finite")]
    InvalidLoss,
    #[error("training step diverged at step {step}: {diagnostics}")]
    DivergedStep { step: u64, diagnostics: String },
    #[error("no training data")]
    NoData,
    #[error("archive format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("requested {requested} frames but only {available} are available")]
    NotEnoughFrames { requested: usize, available: usize },
    #[error("duplicate label `{0}` in prompt bank")]
    DuplicateLabel(String),
    #[error("label `{0}` is not in the prompt bank")]
    UnknownLabel(String),
    #[error("client request failed: {0}")]
    Client(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image decoding failed: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
