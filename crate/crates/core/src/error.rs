use thiserror::Error;

/// Errors produced anywhere in the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention row {row} has no allowed key")]
    DegenerateRow { row: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("box {index} out of bounds: ({x},{y},{w},{h}) exceeds {width}x{height}")]
    BoxOutOfBounds {
        index: usize,
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("unknown glyph {0:?}")]
    UnknownGlyph(char),

    #[error("string {0:?} exceeds maximum length {1}")]
    StringTooLong(String, usize),

    #[error("model error: {0}")]
    Model(String),

    #[error("duplicate LoRA adapter on {0}")]
    DuplicateAdapter(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("undefined score: {0}")]
    UndefinedScore(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted at step {step}: {reason}")]
    Training { step: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::DegenerateRow { .. } => "degenerate_row",
            Error::Layout(_) => "layout",
            Error::BoxOutOfBounds { .. } => "box_out_of_bounds",
            Error::Schedule(_) => "schedule",
            Error::UnknownGlyph(_) => "unknown_glyph",
            Error::StringTooLong(..) => "string_too_long",
            Error::Model(_) => "model",
            Error::DuplicateAdapter(_) => "duplicate_adapter",
            Error::Generation(_) => "generation",
            Error::UndefinedScore(_) => "undefined_score",
            Error::Format(_) => "format",
            Error::Training { .. } => "training",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
