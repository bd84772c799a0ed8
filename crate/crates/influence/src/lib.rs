//! Per-example influence and generalization diagnostics for recorded
//! training runs.
//!
//! Everything here is computed from a single training trajectory (plus, for
//! some diagnostics, a handful of cheap retrainings):
//!
//! * the influence matrix J, whose entry (i, j) is the sensitivity of the
//!   terminal loss on example i to an infinitesimal downweighting of
//!   example j, obtained from one backward adjoint solve per row,
//! * the centered-trace gap estimator (1/(n−1))·tr(J·C_n), a one-run
//!   estimate of the population−training loss gap, together with the
//!   holdout direction ν that makes every cross-validation face share the
//!   same first variation,
//! * exact replace-one displacement accounting: how far test predictions
//!   move when one training example is swapped, split into the replaced
//!   example's initial-gradient effect and the transfer-operator drift,
//! * optimal signal directions: the eigenbasis of C_R = R^{−1/2} W R^{−1/2}
//!   under a complexity metric R, with the worst-case lost-test-motion tail
//!   curve and a graph-Laplacian metric builder,
//! * a drift–diffusion split of recorded SGD runs into a conditional-mean
//!   drift, a mean-zero fluctuation sum, and an exact remainder,
//! * k-fold / leave-k-out risk by explicit retraining.

mod adjoint;
mod cv;
mod drift;
mod gap;
mod replace;
mod spectrum;

pub use adjoint::{
    backward_sensitivity, forward_sensitivity, influence_matrix, AdjointPath, InfluenceMatrix,
    DENSE_HESSIAN_CAP,
};
pub use cv::{cv_risk, cv_risk_kfold, CV_ENUMERATION_CAP};
pub use drift::{
    drift_diffusion, log_log_slope, record_sgd_run, DriftDiffusionReport, SgdRun, SgdStep,
};
pub use gap::{common_first_variation, gap_estimator, CenteringProjector, GapEstimate};
pub use replace::{paired_displacement_norm, replace_one_displacement, ReplaceOneReport};
pub use spectrum::{
    centered_readout_metric, graph_laplacian_metric, signal_spectrum, SignalSpectrum,
    GRAPH_NEIGHBORS, METRIC_RIDGE,
};

/// Errors for influence computations and retraining-based diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum InfluenceError {
    #[error("dense per-snapshot Hessians need d ≤ {cap}, model has {dim} weights")]
    DenseHessianTooLarge { dim: usize, cap: usize },
    #[error("example index {index} out of range for {n} examples")]
    ExampleOutOfRange { index: usize, n: usize },
    #[error("adjoint solves target the uniform objective; trajectory was recorded with example weights")]
    WeightedTrajectory,
    #[error("paired trajectories disagree: {reason}")]
    DatasetMismatch { reason: String },
    #[error("complexity metric is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NonPsdMetric { min_eigenvalue: f64 },
    #[error("complexity metric must be {expected}×{expected}, got {rows}×{cols}")]
    MetricShape { expected: usize, rows: usize, cols: usize },
    #[error("holdout size k = {k} invalid for n = {n} examples")]
    InvalidHoldout { n: usize, k: usize },
    #[error("retraining-based CV is desk-scale: {n} examples exceed the cap {cap}")]
    TooManyExamples { n: usize, cap: usize },
    #[error("{subsets} holdout subsets exceed the enumeration cap {cap}")]
    EnumerationTooLarge { subsets: u128, cap: u128 },
    #[error("batch size {b} invalid for {n} training examples")]
    InvalidBatch { n: usize, b: usize },
    #[error("SGD run holds no recorded steps")]
    EmptyRun,
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Pathwise(#[from] pathwise_operators::PathwiseError),
}
