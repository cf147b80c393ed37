use std::path::PathBuf;

/// Errors produced by the landmark toolkit.
///
/// Every variant carries a stable kebab-case tag (see [`Error::tag`]) so callers
/// and tests can branch on the failure kind without matching message text.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image-too-small: {height}x{width} image cannot hold one {patch}x{patch} patch")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("no-backbone-adapter: external-vit backbone requested but no adapter is registered")]
    NoBackboneAdapter,

    #[error("adapter-shape-mismatch: expected {expected:?} (h, w, dim), adapter returned {actual:?}")]
    AdapterShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("invalid-upsample-target: target {target:?} is smaller than input grid {input:?}")]
    InvalidUpsampleTarget {
        input: (usize, usize),
        target: (usize, usize),
    },

    #[error("fuse-dim-mismatch: local has {local} channels, global region has {global}")]
    FuseDimMismatch { local: usize, global: usize },

    #[error("zero-anchor: anchor descriptor has zero norm")]
    ZeroAnchor,

    #[error("center-out-of-bounds: ({x}, {y}) outside {height}x{width} grid")]
    CenterOutOfBounds {
        x: f64,
        y: f64,
        height: usize,
        width: usize,
    },

    #[error("map-shape-mismatch: {0}")]
    MapShapeMismatch(String),

    #[error("k-too-large: k={k} exceeds {cells} grid cells")]
    KTooLarge { k: usize, cells: usize },

    #[error("augmentation-degenerate: sample {sample} could not keep all landmarks in bounds")]
    AugmentationDegenerate { sample: usize },

    #[error("training-diverged: non-finite loss at {stage} step {step}")]
    TrainingDiverged { stage: &'static str, step: usize },

    #[error("invalid-argument: {0}")]
    InvalidArgument(String),

    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse-error: {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("format-error: {0}")]
    Format(String),
}

impl Error {
    /// Stable kebab-case identifier of the error kind.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::ImageTooSmall { .. } => "image-too-small",
            Error::NoBackboneAdapter => "no-backbone-adapter",
            Error::AdapterShapeMismatch { .. } => "adapter-shape-mismatch",
            Error::InvalidUpsampleTarget { .. } => "invalid-upsample-target",
            Error::FuseDimMismatch { .. } => "fuse-dim-mismatch",
            Error::ZeroAnchor => "zero-anchor",
            Error::CenterOutOfBounds { .. } => "center-out-of-bounds",
            Error::MapShapeMismatch(_) => "map-shape-mismatch",
            Error::KTooLarge { .. } => "k-too-large",
            Error::AugmentationDegenerate { .. } => "augmentation-degenerate",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Io { .. } => "io-error",
            Error::Parse { .. } => "parse-error",
            Error::Format(_) => "format-error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by bad inputs rather than by a runtime fault.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::TrainingDiverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
