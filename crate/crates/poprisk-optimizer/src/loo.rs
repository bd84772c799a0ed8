//! The leave-one-out retraining oracle for the one-step risk expansion.
//!
//! For each example a in the batch, take one preconditioned step on the
//! other b−1 examples and score it on a. The average of those held-out
//! losses is, to first order in the step size, the batch loss minus η times
//! the off-diagonal rate:
//!
//! (1/b) Σ_a ℓ_a(w − ηM ḡ_{−a}) = L̂_B(w) − η·tr(M A_B) + O(η²).
//!
//! Both sides are computed here so the expansion can be checked by direct
//! retraining rather than assumed.

use ndarray::Axis;
use models::{Dataset, Loss, Model};
use numerics::Vector;

use crate::stats::{batch_stats, omega_rate, Preconditioner};
use crate::PopRiskError;

/// Output of [`one_step_loo_risk`]: the retrained truth and the first-order
/// prediction, plus the pieces they share.
#[derive(Clone, Copy, Debug)]
pub struct LooRiskReport {
    /// (1/b) Σ_a ℓ_a(w_{−a}⁺) from b actual one-step retrainings.
    pub true_average: f64,
    /// L̂_B(w) − η·tr(M A_B).
    pub predicted: f64,
    /// Batch loss L̂_B(w) before the step.
    pub batch_loss: f64,
    /// The rate tr(M A_B).
    pub omega: f64,
}

/// Retrain b one-step leave-one-out models w_{−a}⁺ = w − ηM ḡ_{−a} and
/// average the held-out losses ℓ_a(w_{−a}⁺); also return the first-order
/// prediction L̂_B − η·Ω_B(M).
///
/// Exact and O(b²·d) in time: meant for small batches (b ≤ 16) and desk
/// models, where it serves as the oracle for the expansion above.
pub fn one_step_loo_risk(
    model: &Model,
    batch: &Dataset,
    loss: Loss,
    eta: f64,
    preconditioner: &Preconditioner,
) -> Result<LooRiskReport, PopRiskError> {
    let b = batch.num_examples();
    if b < 2 {
        return Err(PopRiskError::BatchTooSmall { got: b });
    }
    let grads = model.per_example_gradients(batch, loss)?;
    let stats = batch_stats(&grads)?;
    let omega = omega_rate(&stats, preconditioner)?;
    let batch_loss = model.loss_value(batch, loss)?;

    let total = grads.sum_axis(Axis(0));
    let w0 = model.weights().clone();
    let mut scratch = model.clone();
    let mut held_out = 0.0;
    for a in 0..b {
        let mean_without: Vector = (&total - &grads.row(a)) / (b as f64 - 1.0);
        let step = preconditioner.apply(&mean_without);
        scratch.set_weights(&w0 - &(&step * eta))?;
        let u = scratch.forward_one(batch.input(a))?;
        held_out += loss.value(u.view(), batch.target(a));
    }
    let true_average = held_out / b as f64;

    Ok(LooRiskReport {
        true_average,
        predicted: batch_loss - eta * omega,
        batch_loss,
        omega,
    })
}
