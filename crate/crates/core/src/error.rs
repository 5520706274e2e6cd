use thiserror::Error;

/// Errors raised by the detection building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera view {view_id}: {reason}")]
    InvalidCamera { view_id: usize, reason: String },

    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),

    #[error("boxes live in different views ({a} vs {b}); cross-view IoU is undefined")]
    CrossViewIou { a: usize, b: usize },

    #[error("rig has no views")]
    EmptyRig,

    #[error("duplicate view id {0} in rig")]
    DuplicateView(usize),

    #[error("unknown view id {0}")]
    UnknownView(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("group id {id} out of range (expected < {n_groups})")]
    GroupOutOfRange { id: usize, n_groups: usize },

    #[error("NaN encountered in {0}")]
    NaN(&'static str),

    #[error("missing feature map for view {0}")]
    MissingFeatures(usize),

    #[error("invalid decoder config: {0}")]
    Config(String),

    #[error("crop region {0}")]
    Crop(String),

    #[error("duplicate crop rule for source view {0}")]
    DuplicateCropRule(usize),

    #[error("invalid denoise layout: {0}")]
    Layout(String),

    #[error("top-k selection needs {k} rows but only {n} are available")]
    TopK { k: usize, n: usize },

    #[error("query set has no scores")]
    MissingScores,

    #[error("scene sampling infeasible: {0}")]
    Infeasible(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    Version { expected: &'static str, found: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
