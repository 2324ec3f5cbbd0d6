use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report.
///
/// Variants are named after the contract they guard so that callers (the CLI
/// in particular) can map them onto exit codes without string matching.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error: k = {k}, d = {d} violates 2 <= k <= d + 1")]
    Dimension { k: usize, d: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("label {label} out of range for {k} classes")]
    Label { label: usize, k: usize },
    #[error(
        "prototype generation did not converge after {epochs} epochs: \
         max gram deviation {achieved:e} > tolerance {tolerance:e}"
    )]
    Convergence {
        epochs: u64,
        achieved: f64,
        tolerance: f64,
    },
    #[error("cannot l2-normalize zero feature vector at row {row}")]
    Normalization { row: usize },
    #[error("loss requires anchored prototypes")]
    Anchoring,
    #[error("class {class} has a zero count")]
    Count { class: usize },
    #[error("rate {0} outside the admissible range")]
    Rate(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("class {class} would be empty")]
    EmptyClass { class: usize },
    #[error("invalid class map: {0}")]
    Map(String),
    #[error("zero vector at row {row}")]
    ZeroVector { row: usize },
    #[error("row {row} is not a probability vector (sum {sum})")]
    Probability { row: usize, sum: f64 },
    #[error("incompatible spec: {0}")]
    IncompatibleSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
