//! Per-example convex losses with exact output-space derivatives.
//!
//! The empirical objective is the mean of per-example terms,
//! Φ(w) = (1/n) Σ_a φ(F(w, z_a); y_a), and every routine downstream works
//! from the output-space gradient and Hessian of φ. Squared loss keeps the
//! output-space Hessian equal to the identity; log-cosh is the smooth convex
//! alternative that exercises all non-identity Hessian code paths.

use ndarray::ArrayView1;
use numerics::{Mat, Vector};

/// Convex C² loss applied per example to the model output u against target y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// φ(u; y) = ½‖u − y‖².
    Squared,
    /// φ(u; y) = Σ_j log cosh(u_j − y_j).
    LogCosh,
}

impl Loss {
    /// Loss value for a single example.
    pub fn value(&self, u: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        match self {
            Loss::Squared => u
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                * 0.5,
            Loss::LogCosh => u
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b).cosh().ln())
                .sum(),
        }
    }

    /// Output-space gradient r = ∇_u φ(u; y).
    pub fn gradient(&self, u: ArrayView1<f64>, y: ArrayView1<f64>) -> Vector {
        match self {
            Loss::Squared => Vector::from_iter(u.iter().zip(y.iter()).map(|(a, b)| a - b)),
            Loss::LogCosh => Vector::from_iter(u.iter().zip(y.iter()).map(|(a, b)| (a - b).tanh())),
        }
    }

    /// Output-space Hessian ∇²_u φ(u; y), a p×p matrix. Both losses are
    /// separable across coordinates, so the Hessian is diagonal.
    pub fn hessian(&self, u: ArrayView1<f64>, y: ArrayView1<f64>) -> Mat {
        Mat::from_diag(&self.hessian_diag(u, y))
    }

    /// Diagonal of the output-space Hessian.
    pub fn hessian_diag(&self, u: ArrayView1<f64>, y: ArrayView1<f64>) -> Vector {
        match self {
            Loss::Squared => Vector::ones(u.len()),
            Loss::LogCosh => Vector::from_iter(u.iter().zip(y.iter()).map(|(a, b)| {
                let t = (a - b).tanh();
                1.0 - t * t
            })),
        }
    }
}
