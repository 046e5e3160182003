//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A network description violates one of its structural invariants.
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    /// A forward or reverse pass produced a non-finite value.
    #[error("non-finite value during {stage} (layer {layer})")]
    NonFinite { stage: &'static str, layer: usize },

    /// A magnitude function returned NaN/inf for some batch point.
    #[error("instance `{instance}` produced a non-finite {side} magnitude at point {index}")]
    NonFiniteMagnitude {
        instance: String,
        side: &'static str,
        index: usize,
    },

    /// Instance name not present in the registry.
    #[error("unknown PSO instance `{0}`")]
    UnknownInstance(String),

    /// A registry instance was built without a required parameter.
    #[error("instance `{instance}` requires parameter `{param}`")]
    MissingParam {
        instance: &'static str,
        param: &'static str,
    },

    /// A parameter value is outside its admissible range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },

    /// Incompatible shapes were passed to an operation.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A linear solve hit a (numerically) singular matrix.
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    /// A distribution constructor was given inadmissible data.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Training aborted; the payload names the last iteration that completed.
    #[error("training aborted at iteration {iteration}: {cause}")]
    TrainingAborted {
        iteration: u64,
        #[source]
        cause: Box<Error>,
    },

    /// Invalid training configuration.
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
