//! Sub-concept discovery on serialized 3D feature fields.
//!
//! The engine consumes a feature field (per-sample density plus a
//! segmentation-feature channel and a query-feature channel), trains a small
//! projector network jointly with a bank of class prototypes, and optionally
//! steers the discovered classes toward user queries expressed as embeddings
//! in the query-feature space. A synthetic scene generator and a full
//! point-cloud evaluation protocol (Hungarian / embedding matching, panoptic
//! quality, mIoU/mAcc) make results verifiable end to end.

pub mod eval;
pub mod fieldset;
pub mod guidance;
pub mod hungarian;
pub mod math;
pub mod projector;
pub mod prototypes;
pub mod trainer;

pub use fieldset::{FieldSample, FieldSet, Ray, SampleBatch};
pub use guidance::{LossWeights, Query, QuerySet};
pub use projector::{OptimizerState, ProjectorParams};
pub use prototypes::{AssignmentBatch, PrototypeBank};
pub use trainer::{RunConfig, RunOutput};

/// Crate-wide error type.
///
/// The CLI maps `Format`, `Validation`, `Usage` and `Io` to exit code 2
/// (bad input) and `Numeric` to exit code 3 (numerical failure).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Inputs violate a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),
    /// An API was called in the wrong order or with mismatched state.
    #[error("usage error: {0}")]
    Usage(String),
    /// A non-finite value was produced where a finite one is required.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
