use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("could not place {requested} non-overlapping objects after {attempts} attempts")]
    PlacementFailure { requested: usize, attempts: usize },

    #[error("object mask {index} is empty")]
    EmptyMask { index: usize },

    #[error("encoder input must be {expected}x{expected}, got {height}x{width}")]
    Resolution {
        expected: usize,
        height: usize,
        width: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("prompt spans do not match image tokens: {0}")]
    SpanMismatch(String),

    #[error("query position {position} has every prompt masked out")]
    AllMasked { position: usize },

    #[error("shifting prompt {prompt} by ({dx}, {dy}) leaves an empty mask")]
    EmptyShift { prompt: usize, dx: i32, dy: i32 },

    #[error("timestep {t} outside [0, {max})")]
    Timestep { t: usize, max: usize },

    #[error("non-finite loss at step {step}; batch dumped to {}", dump.display())]
    NonFiniteLoss { step: u64, dump: PathBuf },

    #[error("non-finite gradient at step {step} in {}; batch dumped to {}", params.join(", "), dump.display())]
    NonFiniteGradient { step: u64, params: Vec<String>, dump: PathBuf },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no segments detected")]
    NoSegments,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("frozen module `{module}` checksum mismatch (expected {expected}, found {found})")]
    FrozenChecksum {
        module: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint was built with a different configuration; differing fields: {}", .0.join(", "))]
    IncompatibleConfig(Vec<String>),

    #[error("configuration invalid:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing variant checkpoint `{0}`")]
    MissingVariant(String),

    #[error("{0}")]
    Invalid(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
