//! Dense linear-algebra and integration substrate shared by the rest of the
//! workspace: symmetric eigendecomposition, SVD, Moore–Penrose pseudoinverse
//! with a relative rank tolerance, matrix exponential, fixed-step RK4
//! integration, and seeded RNG construction.
//!
//! Everything here is deterministic: factorizations are pure functions of
//! their inputs, the ODE integrator uses a fixed uniform step, and RNGs are
//! explicit ChaCha streams created from a seed.

mod linalg;
mod ode;
pub mod tol;

pub use linalg::{expm, pinv, sqrt_psd, svd, sym_eig, NumericsError, SpectralDecomposition, Svd};
pub use ode::{ode_rk4, ode_rk4_mat, OdeSolution};

use rand_chacha::rand_core::SeedableRng;

/// Row-major dense matrix of f64.
pub type Mat = ndarray::Array2<f64>;
/// Dense vector of f64.
pub type Vector = ndarray::Array1<f64>;

/// Deterministic RNG stream for a given seed. Every randomized routine in the
/// workspace takes its stream from here so runs replay bit-for-bit.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Frobenius norm.
pub fn fro_norm(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral (operator) norm via SVD; 0 for an empty matrix.
pub fn op_norm(a: &Mat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    svd(a).sigma.first().copied().unwrap_or(0.0)
}

/// Euclidean norm of a vector.
pub fn vec_norm(v: &Vector) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// n×n identity.
pub fn eye(n: usize) -> Mat {
    Mat::eye(n)
}
