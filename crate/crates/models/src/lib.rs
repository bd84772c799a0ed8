//! Small differentiable models with exact stacked outputs, Jacobians, and
//! per-example gradients, plus the synthetic dataset generators used by the
//! experiment suite.
//!
//! Everything here is desk scale: a handful of examples, a few hundred
//! weights. Derivatives are computed by explicit layer-wise backpropagation
//! so that individual Jacobian rows are exact, and curvature is exposed
//! through exact Hessian-vector products rather than a materialized Hessian.

mod dataset;
mod loss;
mod model;

pub use dataset::{make_dataset, make_modular_split, Dataset, DatasetMeta, GeneratorSpec, ModularOp};
pub use loss::Loss;
pub use model::{Activation, Model, StackedOutputs};

/// Errors for model construction, evaluation, and dataset generation.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input has dimension {got}, model expects {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("targets have dimension {got}, model produces {expected}")]
    OutputDimMismatch { expected: usize, got: usize },
    #[error("weight vector has length {got}, model has {expected} weights")]
    WeightLenMismatch { expected: usize, got: usize },
    #[error("dataset must contain at least one example")]
    EmptyDataset,
    #[error("targets have {got} rows, inputs have {expected}")]
    TargetLenMismatch { expected: usize, got: usize },
    #[error("noise record has {got} rows, dataset has {expected}")]
    NoiseLenMismatch { expected: usize, got: usize },
    #[error("invalid generator configuration: {0}")]
    InvalidGenerator(String),
    #[error("failed to parse dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
}
