//! Per-parameter gates: the O(d) realization of the diagonal rate
//! maximizer.
//!
//! For diagonal base and rate, the exact maximizer of tr(M A_B) is the
//! binary mask that keeps parameter k exactly when μ_k² > α·σ̂_k, where σ̂
//! already carries the leave-one-out 1/(b−1) scaling. The hard gate is that
//! mask; the soft gate relaxes it to a rational score in [0,1] that keeps
//! the same zero set; the SNR gate drops the subtraction and merely
//! downweights noisy coordinates.

use serde::{Deserialize, Serialize};

use numerics::Vector;

use crate::PopRiskError;

/// Which gate shape to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Binary mask 1{μ_k² > α·σ̂_k}; strict at the boundary.
    Hard,
    /// (μ_k² − α·σ̂_k)₊ / ((μ_k² − α·σ̂_k)₊ + λ_pop·σ̂_k + ε).
    Soft,
    /// μ_k² / (μ_k² + λ_pop·σ̂_k + ε), no subtraction.
    Snr,
}

/// Gate hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: GateKind,
    /// Leave-one-out coefficient α: 1 on fresh batches, b/(n−b) when batches
    /// are drawn from a finite pool of n examples. See [`loo_coefficient`].
    pub alpha: f64,
    /// Soft-gate variance weight λ_pop.
    pub lambda_pop: f64,
    /// Denominator floor ε.
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            kind: GateKind::Soft,
            alpha: 1.0,
            lambda_pop: 1.0,
            epsilon: 1e-8,
        }
    }
}

/// Evaluate the per-parameter gate q ∈ [0,1]^d.
///
/// `mean` is the (bias-corrected) first-moment estimate μ and `variance`
/// the matching spread estimate σ̂, already scaled by 1/(b−1) so that the
/// hard cutoff reads μ_k² > α·σ̂_k. Negative variance entries, which can
/// only arise from caller roundoff, are clamped to zero so the outputs stay
/// in [0,1].
pub fn diagonal_gate(mean: &Vector, variance: &Vector, cfg: &GateConfig) -> Vector {
    assert_eq!(
        mean.len(),
        variance.len(),
        "gate inputs must share a length"
    );
    let mut q = Vector::zeros(mean.len());
    for k in 0..mean.len() {
        let mu2 = mean[k] * mean[k];
        let s = variance[k].max(0.0);
        q[k] = match cfg.kind {
            GateKind::Hard => {
                if mu2 > cfg.alpha * s {
                    1.0
                } else {
                    0.0
                }
            }
            GateKind::Soft => {
                let delta = (mu2 - cfg.alpha * s).max(0.0);
                delta / (delta + cfg.lambda_pop * s + cfg.epsilon)
            }
            GateKind::Snr => mu2 / (mu2 + cfg.lambda_pop * s + cfg.epsilon),
        };
    }
    q
}

/// Sampling regime for the leave-one-out coefficient α.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LooRegime {
    /// Every batch is a fresh draw from the population: α = 1.
    FreshBatch,
    /// Batches of size b are subsets of a fixed pool of n examples:
    /// α = b/(n−b), the without-replacement shrinkage of the batch-mean
    /// covariance.
    FinitePopulation { n: usize, b: usize },
}

/// The coefficient multiplying σ̂ in the gate cutoff.
pub fn loo_coefficient(regime: LooRegime) -> Result<f64, PopRiskError> {
    match regime {
        LooRegime::FreshBatch => Ok(1.0),
        LooRegime::FinitePopulation { n, b } => {
            if b == 0 || b >= n {
                return Err(PopRiskError::InvalidSample { n, b });
            }
            Ok(b as f64 / (n - b) as f64)
        }
    }
}
