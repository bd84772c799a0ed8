//! Shared numeric tolerances. Each constant records why its value is what it
//! is; suites that need a different budget say so at the call site instead of
//! silently loosening these.

/// Relative singular-value / eigenvalue cutoff below which a direction is
/// treated as numerically null. Used by every pseudoinverse and spectral
/// projector in the workspace.
pub const RANK_TOL: f64 = 1e-10;

/// Maximum relative asymmetry `max|A - Aᵀ| / max|A|` accepted by [`crate::sym_eig`].
/// Inputs inside this band are symmetrized; anything worse is a caller bug.
pub const SYM_ASYM_TOL: f64 = 1e-8;

/// Residual budget for the four Penrose identities on well-scaled inputs
/// (dimensions ≤ 20, entries O(1)).
pub const PENROSE_TOL: f64 = 1e-8;

/// Relative accuracy of the matrix exponential on symmetric inputs with
/// ‖A‖ ≤ 5, validated against the eigendecomposition route in tests.
pub const EXPM_SYM_TOL: f64 = 1e-9;

/// Default RK4 grid density: steps per unit time for trajectory recording and
/// operator ODE solves. Fixed-step keeps runs reproducible across platforms;
/// 200/unit makes quadrature error negligible next to the suite tolerances.
pub const DEFAULT_STEPS_PER_UNIT_TIME: usize = 200;
