//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("scene placement failed: {0}")]
    Placement(String),

    #[error("no template expression disambiguates object {target} in scene {seed}")]
    ExpressionAmbiguous { seed: u64, target: usize },

    #[error("expression does not parse under the template grammar: {0:?}")]
    ExpressionParse(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("negative loss weight: {0}")]
    NegativeWeight(String),

    #[error("non-finite loss at step {step}; try a lower learning rate")]
    Divergence { step: usize },

    #[error("stage ordering violation: {0}")]
    StageOrder(String),

    #[error("train/eval split overlap: {0}")]
    SplitOverlap(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("missing artifact: {}", .0.display())]
    NotFound(PathBuf),

    #[error("refusing to overwrite {} without --force", .0.display())]
    WouldOverwrite(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
