//! Spectral theory of training with the tangent kernel frozen at
//! initialization.
//!
//! At the base point the train Jacobian factors as J_S = UΣVᵀ, and every
//! question about what training does to held-out predictions reduces to
//! calculus on the singular spectrum. This crate bundles that calculus:
//!
//! - [`SpectralModel`]: the SVD, the test map C₀ = J_Q V Σ⁻¹ on the mobile
//!   singular space, the visibility Gramian Γ₀ = C₀ᵀC₀, the signal
//!   coordinates ā, and the noise covariance in those coordinates.
//! - [`Filter`]: self-adjoint contractions 0 ⪯ M ⪯ I on the singular space.
//!   Five instances (gradient flow at time t, ridge shrinkage, hard
//!   thresholding, rank truncation, full interpolation) cover the classical
//!   training rules.
//! - [`bias_variance`]: the single decomposition every filter obeys —
//!   bias āᵀ(I−M)Γ₀(I−M)ā plus variance tr(MΓ₀MΣ_ζ) — with a Monte Carlo
//!   sampler to check it against.
//! - [`predictive_rank_path`]: risk along rank truncations, whose increment
//!   signs are the capacity-axis story (descent, peak, second descent).
//! - [`grokking_transfer_mass`]: the spectrum of n²M_tΓ₀M_t, the test
//!   transfer mass that leading modes saturate early and tail modes fill
//!   late.
//! - [`ridge_flow`] and [`linear_window_operators`]: the linear-model closed
//!   forms where the whole pathwise machinery collapses to exponentials of
//!   the data spectrum.

pub mod filter;
pub mod linear;
pub mod risk;
pub mod spectral;

pub use filter::{make_filter, Filter, FilterKind};
pub use linear::{linear_window_operators, ridge_flow, LinearOperators, RidgeFlow};
pub use risk::{
    bias_variance, grokking_mass_table, grokking_transfer_mass, monte_carlo_risk,
    predictive_rank_path, ridge_path_table, GrokkingMassRow, McRisk, RankRisk, RidgePathRow,
    RiskSplit, TransferMass,
};
pub use spectral::{build_spectral_model, saturation_time, NoiseCovariance, SpectralModel};

/// Errors for spectral-model construction and filter evaluation.
#[derive(Debug, thiserror::Error)]
pub enum FrozenKernelError {
    #[error("Jacobian at the base point has rank zero at relative tolerance {tol:e}")]
    DegenerateJacobian { tol: f64 },
    #[error("invalid filter parameter: {0}")]
    InvalidFilter(String),
    #[error("noise covariance must be {expected}×{expected}, got {rows}×{cols}")]
    NoiseCovarianceShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("noise variance must be finite and non-negative, got {0}")]
    BadNoiseVariance(f64),
    #[error("ridge flow needs a bias-free linear model with one output; got {0}")]
    NotLinearScalar(String),
    #[error("weight decay must be finite and non-negative, got {0}")]
    BadWeightDecay(f64),
    #[error("horizon must be finite and non-negative, got {0}")]
    BadHorizon(f64),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}
