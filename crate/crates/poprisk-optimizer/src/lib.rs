//! Population-risk training from gradient leave-one-out statistics.
//!
//! A minibatch of per-example gradients carries more than its mean: the
//! spread across examples prices how much of the mean is noise. The
//! off-diagonal agreement
//!
//! Ω_B(M) = ḡ_BᵀMḡ_B − tr(MΣ_B)/(b−1) = tr(M A_B),
//! A_B = ḡ_Bḡ_Bᵀ − Σ_B/(b−1),
//!
//! is the first-order decrease in held-out risk produced by one
//! preconditioned step, so maximizing it over 0 ⪯ M ⪯ P picks the step that
//! helps unseen data rather than the batch itself. This crate implements
//! that calculus and the optimizer built on it:
//!
//! - [`batch_stats`]: batch mean, centered spread, diagonal variance, and
//!   (at small parameter counts) the dense Σ_B and A_B.
//! - [`omega_rate`] / [`omega_rate_kernel_blocks`]: the rate tr(M A_B) in
//!   parameter space and through kernel blocks K_ac^M = J_a M J_cᵀ.
//! - [`optimal_projector`]: the exact maximizer
//!   M* = P^{1/2} 1_{(0,∞)}(P^{1/2} A_B P^{1/2}) P^{1/2}.
//! - [`diagonal_gate`]: the per-parameter hard/soft/SNR gates that realize
//!   the diagonal cutoff μ_k² > α·σ̂_k at O(d) cost.
//! - [`poprisk_step`] / [`adamw_step`]: the gated adaptive update and the
//!   ungated baseline it reduces to when every gate is open.
//! - [`one_step_loo_risk`]: the leave-one-out retraining oracle that checks
//!   the first-order expansion against actual held-out losses.

pub mod gate;
pub mod loo;
pub mod optimizer;
pub mod stats;

pub use gate::{diagonal_gate, loo_coefficient, GateConfig, GateKind, LooRegime};
pub use loo::{one_step_loo_risk, LooRiskReport};
pub use optimizer::{
    adamw_step, poprisk_step, poprisk_step_with_stats, PopRiskConfig, PopRiskState, StepInfo,
    TrainingLogRow, VarianceMode,
};
pub use stats::{
    batch_stats, omega_rate, omega_rate_kernel_blocks, optimal_projector, rate_projector,
    BatchStats, Preconditioner, DENSE_THRESHOLD,
};

/// Errors for batch statistics, gating, and the gated update.
#[derive(Debug, thiserror::Error)]
pub enum PopRiskError {
    #[error("leave-one-out statistics need at least 2 gradients per batch, got {got}")]
    BatchTooSmall { got: usize },
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("preconditioner is not symmetric: max |M - Mᵀ| entry {defect:e} exceeds tolerance")]
    AsymmetricPreconditioner { defect: f64 },
    #[error("preconditioner is not positive semidefinite: eigenvalue {min_eigenvalue:e}")]
    IndefinitePreconditioner { min_eigenvalue: f64 },
    #[error(
        "dense rate matrix unavailable at dimension {dim} (materialized only up to {cap}); \
         use the diagonal gate path"
    )]
    DensePathUnavailable { dim: usize, cap: usize },
    #[error("gradient contains a non-finite entry")]
    NonFiniteGradient,
    #[error("finite-population leave-one-out needs b < n, got n={n}, b={b}")]
    InvalidSample { n: usize, b: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}
