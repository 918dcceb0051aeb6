use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MktError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MktError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this graph")]
    DoubleBackward,

    #[error("image extent {extent} not divisible by patch size {patch}")]
    BadPatchSize { extent: usize, patch: usize },

    #[error("unknown label {0}")]
    UnknownLabel(String),

    #[error("topn = {topn} must be below the vocabulary size {d}")]
    TopNOutOfRange { topn: usize, d: usize },

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("frozen parameter {0} accumulated a gradient")]
    FrozenViolation(String),

    #[error("class has no positives")]
    NoPositives,

    #[error("gradient check failed for {0}")]
    GradCheckFailed(String),

    #[error("task vocabulary is empty")]
    EmptyTaskVocabulary,

    #[error("teacher map is rank deficient (rank {rank} < {needed})")]
    InfeasibleConstraint { rank: usize, needed: usize },

    #[error("label pool of {pool} cannot supply {need} distinct labels")]
    PoolTooSmall { pool: usize, need: usize },

    #[error("non-finite loss at {stage} epoch {epoch} step {step}")]
    NonFiniteLoss { stage: u8, epoch: usize, step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MktError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MktError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MktError::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line surface: 1 usage/config,
    /// 2 numerical failure, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            MktError::Config(_)
            | MktError::Io { .. }
            | MktError::Format(_)
            | MktError::UnknownLabel(_)
            | MktError::TopNOutOfRange { .. }
            | MktError::KOutOfRange { .. }
            | MktError::BadPatchSize { .. }
            | MktError::PoolTooSmall { .. }
            | MktError::EmptyTaskVocabulary => 1,
            MktError::NonFinite(_)
            | MktError::NonFiniteLoss { .. }
            | MktError::InfeasibleConstraint { .. } => 2,
            MktError::ShapeMismatch { .. }
            | MktError::NotScalar(_)
            | MktError::DoubleBackward
            | MktError::MissingGrad(_)
            | MktError::FrozenViolation(_)
            | MktError::NoPositives
            | MktError::GradCheckFailed(_) => 3,
        }
    }
}
