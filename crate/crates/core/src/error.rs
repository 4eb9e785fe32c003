//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by parameter validation, loss evaluation, the property
/// certifier, training, and the evaluation metrics.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument left the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural precondition on the inputs failed (shapes, counts, ordering).
    #[error("configuration error: {0}")]
    Config(String),

    /// Loss hyperparameters violate a hard invariant.
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// The operation requires the theoretical guarantees to hold
    /// (lambda_g above its bound and u_m <= pi/2) but they do not.
    #[error("guarantees do not hold for these parameters: {0}")]
    GuaranteesNotSatisfied(String),

    /// The scalar loss was found non-convex where convexity was required.
    /// Carries the witness abscissae whose derivative signs form the
    /// impossible -,+,- pattern.
    #[error("property violation: derivative sign pattern -,+,- at a = {witnesses:?}")]
    PropertyViolation { witnesses: Vec<f64> },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    TrainingDiverged { epoch: usize },

    /// Not enough samples to compute a statistic.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Feature aggregation collapsed to (numerically) zero.
    #[error("degenerate aggregation: input directions cancel")]
    DegenerateAggregation,

    /// File or serialization failure in an export helper.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV parse/write failure in an export helper.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
