//! Operator stack on recorded training trajectories.
//!
//! A trajectory is a time grid with weight snapshots from gradient flow (or a
//! discrete optimizer). On a window (s, T) of that trajectory this crate
//! builds the transfer operators that govern output-space dynamics:
//!
//! * the propagator 𝒫(t, s) of the output-gradient flow,
//! * the cumulative dissipation Gramian W (loss drop = g(s)ᵀ W g(s)),
//! * the displacement operators D (train) and G (test),
//! * normalized channels, the optimal linear predictor A∘, the remainder
//!   R⊥, and the visibility operator Γ_Q,
//! * signal/reservoir spectral projectors of W and the resulting
//!   bias / reservoir-noise / signal-noise decomposition of test error,
//! * matrix-free dual solves that apply W, Gᵀ, and Dᵀ with two ODE
//!   integrations instead of dense quadrature.

mod dual;
mod operators;
mod trajectory;

pub use dual::{dual_solve_d_adjoint, dual_solve_g_adjoint, dual_solve_w};
pub use operators::{
    dissipation_identity_check, four_cell_decomposition, low_dissipation_projector,
    predict_test_displacement, propagator, window_operators, window_operators_with,
    FourCellDecomposition, OperatorSummary, WindowOperators, WindowOptions,
};
pub use trajectory::{record_gradient_flow, record_weighted_gradient_flow, TrainingTrajectory, TrajectoryKind};

/// Errors for trajectory recording and operator construction.
#[derive(Debug, thiserror::Error)]
pub enum PathwiseError {
    #[error("training flow diverged near t = {time}")]
    Diverged { time: f64 },
    #[error("time {time} lies outside the recorded grid [0, {horizon}]")]
    TimeOutsideGrid { time: f64, horizon: f64 },
    #[error("window ({s}, {t}) covers fewer than two grid nodes")]
    WindowTooNarrow { s: f64, t: f64 },
    #[error("four-cell decomposition needs a dataset with a noise record")]
    MissingNoiseRecord,
    #[error("loss must be non-increasing along gradient flow; rose by {rise} at node {node}")]
    LossIncreased { node: usize, rise: f64 },
    #[error("example weights have length {got}, dataset has {expected} examples")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
}
