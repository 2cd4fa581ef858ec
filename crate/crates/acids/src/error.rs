//! Crate-wide error type.

use thiserror::Error;

/// Principals that may request access to sealed evaluation labels.
///
/// Labels travel with every dataset for scoring purposes but the training
/// and adaptation code paths must never read them. `SealedLabels::open`
/// checks the caller's principal at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Principal {
    Trainer,
    Adapter,
    Evaluator,
}

impl std::fmt::Display for Principal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Principal::Trainer => write!(f, "trainer"),
            Principal::Adapter => write!(f, "adapter"),
            Principal::Evaluator => write!(f, "evaluator"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("prediction batch is empty")]
    EmptyBatch,

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("domain {0} has no samples in the batch")]
    EmptyDomain(usize),

    #[error("row {row} is not a probability vector (sum {sum})")]
    NotAProbabilityRow { row: usize, sum: f64 },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("domain {0} is not registered")]
    UnknownDomain(usize),

    #[error("batch of {0} samples is too small for batch statistics (need >= 2)")]
    BatchTooSmall(usize),

    #[error("domain {0} is already registered")]
    DuplicateDomain(usize),

    #[error("cannot register domain {requested}: capacity is {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("statistics estimation stream produced no batches")]
    EmptyStream,

    #[error("gradients already computed for this graph")]
    GraphConsumed,

    #[error("no prediction batch for source domain {0}")]
    MissingDomainBatch(usize),

    #[error("non-finite loss at step {step}; joint matrices dumped")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("domain {domain} exhausted: requested {requested}, remaining {remaining}")]
    Exhausted {
        domain: usize,
        requested: usize,
        remaining: usize,
    },

    #[error("fraction {fraction} leaves class {class} with no samples")]
    FractionTooSmall { class: usize, fraction: f64 },

    #[error("input is empty")]
    EmptyInput,

    #[error("label {label} out of range [0, {bound})")]
    LabelOutOfRange { label: i64, bound: usize },

    #[error("sealed labels may only be opened by the evaluator, not by the {0}")]
    SealedLabelAccess(Principal),

    #[error("source-free contract violated: {0}")]
    SourceFreeViolation(String),

    #[error("checkpoint file is malformed: {0}")]
    MalformedCheckpoint(String),

    #[error("output directory is locked by another run ({0})")]
    OutputLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
