//! Drift–diffusion decomposition of recorded SGD runs.
//!
//! Each SGD step moves the test outputs by (to first order in the step)
//! −η·J_Q(w_k)·ĝ_k, and the minibatch gradient splits into its conditional
//! mean plus a mean-zero fluctuation, ĝ_k = μ_k + ξ_k with μ_k the
//! full-dataset gradient at w_k. Summing over a run,
//!
//!   U_Q(w_N) − U_Q(w_0) = −η Σ_k L_k μ_k  −  η Σ_k L_k ξ_k  +  R_Q,
//!
//! with L_k = J_Q(w_k). The drift term grows like the elapsed time T = ηN;
//! the diffusion term is a martingale sum growing like √(ηT/b); the
//! remainder collects Taylor residue and is bounded by (β/2)Σ‖Δw_k‖² for
//! β-smooth test outputs. The recorder stores exactly the per-step pieces
//! needed to evaluate each term, so the identity holds by construction and
//! the scale separation can be measured by regression over horizon grids.

use models::{Dataset, Loss, Model};
use numerics::{op_norm, seeded_rng, vec_norm, Mat, Vector};

use crate::InfluenceError;

/// One recorded SGD step: everything needed to replay the decomposition.
#[derive(Clone, Debug)]
pub struct SgdStep {
    /// L_k = J_Q(w_k): test Jacobian before the step.
    pub test_jacobian: Mat,
    /// μ_k: full-dataset mean gradient at w_k (the conditional mean of the
    /// batch gradient under uniform sampling).
    pub mean_gradient: Vector,
    /// ξ_k: batch mean gradient minus μ_k; mean-zero given w_k.
    pub noise: Vector,
    /// w_{k+1} − w_k = −η(μ_k + ξ_k).
    pub weight_delta: Vector,
}

/// A recorded SGD run on a fixed train/test pair.
#[derive(Clone, Debug)]
pub struct SgdRun {
    /// Step size.
    pub eta: f64,
    /// Examples per batch (without replacement, resampled each step).
    pub batch_size: usize,
    /// Per-step records, in step order.
    pub steps: Vec<SgdStep>,
    /// U_Q(w_0).
    pub initial_test_outputs: Vector,
    /// U_Q(w_N).
    pub final_test_outputs: Vector,
    /// J_Q(w_N): closes the consecutive-Jacobian curvature estimate.
    pub final_test_jacobian: Mat,
}

impl SgdRun {
    /// Elapsed optimization time T = η·(number of steps).
    pub fn horizon(&self) -> f64 {
        self.eta * self.steps.len() as f64
    }
}

/// The decomposition of a run's test displacement.
#[derive(Clone, Debug)]
pub struct DriftDiffusionReport {
    /// −η Σ_k L_k μ_k.
    pub drift: Vector,
    /// −η Σ_k L_k ξ_k.
    pub diffusion: Vector,
    /// displacement − drift − diffusion (exact by construction).
    pub remainder: Vector,
    /// U_Q(w_N) − U_Q(w_0).
    pub displacement: Vector,
    /// Secant estimate of the test-output smoothness constant β: the
    /// largest ‖L_{k+1} − L_k‖_op / ‖Δw_k‖ along the run.
    pub curvature_estimate: f64,
    /// (β̂/2) Σ_k ‖Δw_k‖², the Taylor-remainder budget at that estimate.
    pub remainder_bound: f64,
    /// Fitted slope of ‖diffusion‖ against horizon, when a grid fit was
    /// attached; single runs leave it empty.
    pub diffusion_exponent: Option<f64>,
    /// Fitted slope of ‖drift‖ against horizon, when attached.
    pub drift_exponent: Option<f64>,
}

fn mean_of_rows(grads: &Mat, indices: &[usize]) -> Vector {
    let mut acc = Vector::zeros(grads.ncols());
    for &i in indices {
        acc += &grads.row(i);
    }
    acc / indices.len() as f64
}

/// Run SGD with uniform without-replacement batches and record the per-step
/// pieces of the drift–diffusion identity. Deterministic in the seed.
pub fn record_sgd_run(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    loss: Loss,
    eta: f64,
    batch_size: usize,
    num_steps: usize,
    seed: u64,
) -> Result<SgdRun, InfluenceError> {
    let n = train.num_examples();
    if batch_size < 1 || batch_size > n {
        return Err(InfluenceError::InvalidBatch { n, b: batch_size });
    }
    let mut rng = seeded_rng(seed);
    let mut scratch = model.clone();
    let initial_test_outputs = scratch.forward_stacked(test)?.into_vector();
    let all: Vec<usize> = (0..n).collect();
    let mut steps = Vec::with_capacity(num_steps);
    for _ in 0..num_steps {
        let grads = scratch.per_example_gradients(train, loss)?;
        let mean_gradient = mean_of_rows(&grads, &all);
        // Sorted batch indices make the b = n batch sum bitwise identical
        // to the full mean, so full-batch runs have exactly zero noise.
        let mut batch = rand::seq::index::sample(&mut rng, n, batch_size).into_vec();
        batch.sort_unstable();
        let batch_mean = mean_of_rows(&grads, &batch);
        let noise = &batch_mean - &mean_gradient;
        let test_jacobian = scratch.jacobian_stacked(test)?;
        let weight_delta = batch_mean.mapv(|v| -eta * v);
        scratch.step_weights(&batch_mean, -eta)?;
        steps.push(SgdStep { test_jacobian, mean_gradient, noise, weight_delta });
    }
    let final_test_outputs = scratch.forward_stacked(test)?.into_vector();
    let final_test_jacobian = scratch.jacobian_stacked(test)?;
    Ok(SgdRun {
        eta,
        batch_size,
        steps,
        initial_test_outputs,
        final_test_outputs,
        final_test_jacobian,
    })
}

/// Evaluate the drift–diffusion identity on a recorded run.
pub fn drift_diffusion(run: &SgdRun) -> Result<DriftDiffusionReport, InfluenceError> {
    if run.steps.is_empty() {
        return Err(InfluenceError::EmptyRun);
    }
    let mq = run.initial_test_outputs.len();
    let mut drift = Vector::zeros(mq);
    let mut diffusion = Vector::zeros(mq);
    let mut delta_sq_sum = 0.0;
    let mut curvature_estimate: f64 = 0.0;
    for (k, step) in run.steps.iter().enumerate() {
        drift.scaled_add(-run.eta, &step.test_jacobian.dot(&step.mean_gradient));
        diffusion.scaled_add(-run.eta, &step.test_jacobian.dot(&step.noise));
        let delta_norm = vec_norm(&step.weight_delta);
        delta_sq_sum += delta_norm * delta_norm;
        if delta_norm > 0.0 {
            let next = run
                .steps
                .get(k + 1)
                .map(|s| &s.test_jacobian)
                .unwrap_or(&run.final_test_jacobian);
            let jac_gap = op_norm(&(next - &step.test_jacobian));
            curvature_estimate = curvature_estimate.max(jac_gap / delta_norm);
        }
    }
    let displacement = &run.final_test_outputs - &run.initial_test_outputs;
    let remainder = &displacement - &drift - &diffusion;
    Ok(DriftDiffusionReport {
        drift,
        diffusion,
        remainder,
        displacement,
        curvature_estimate,
        remainder_bound: 0.5 * curvature_estimate * delta_sq_sum,
        diffusion_exponent: None,
        drift_exponent: None,
    })
}

/// Least-squares slope of ln(y) against ln(x). Points with non-positive
/// coordinates are rejected by assertion; callers fit norms of nonzero
/// quantities.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "slope fit needs at least two points");
    let logs: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| {
            assert!(x > 0.0 && y > 0.0, "log-log fit needs positive data, got ({x}, {y})");
            (x.ln(), y.ln())
        })
        .collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use models::{make_dataset, GeneratorSpec};

    fn setup(n: usize) -> (Model, Dataset, Dataset) {
        let train = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: n,
                input_dim: 3,
                output_dim: 1,
                noise_std: 0.8,
            },
            41,
        )
        .unwrap();
        let test = make_dataset(
            &GeneratorSpec::LinearGaussian { num_examples: 4, input_dim: 3, output_dim: 1 },
            42,
        )
        .unwrap();
        (Model::linear(3, 1, 43), train, test)
    }

    #[test]
    fn full_batch_runs_have_exactly_zero_diffusion() {
        let (model, train, test) = setup(6);
        let run = record_sgd_run(&model, &train, &test, Loss::Squared, 0.05, 6, 20, 1).unwrap();
        for step in &run.steps {
            assert_eq!(vec_norm(&step.noise), 0.0);
        }
        let report = drift_diffusion(&run).unwrap();
        assert_eq!(vec_norm(&report.diffusion), 0.0);
    }

    #[test]
    fn the_decomposition_recombines_to_the_displacement() {
        let (model, train, test) = setup(8);
        let run = record_sgd_run(&model, &train, &test, Loss::Squared, 0.03, 2, 30, 7).unwrap();
        let report = drift_diffusion(&run).unwrap();
        let recombined = &report.drift + &report.diffusion + &report.remainder;
        let scale = 1.0 + vec_norm(&report.displacement);
        assert!(vec_norm(&(&recombined - &report.displacement)) <= 1e-13 * scale);
    }

    #[test]
    fn linear_models_leave_no_remainder() {
        // U_Q is linear in the weights, so the per-step first-order
        // expansion is exact: remainder and curvature both vanish.
        let (model, train, test) = setup(6);
        let run = record_sgd_run(&model, &train, &test, Loss::Squared, 0.04, 3, 25, 3).unwrap();
        let report = drift_diffusion(&run).unwrap();
        let scale = 1.0 + vec_norm(&report.displacement);
        assert!(vec_norm(&report.remainder) <= 1e-12 * scale);
        assert!(report.curvature_estimate <= 1e-12);
        assert!(report.remainder_bound <= 1e-12);
    }

    #[test]
    fn runs_replay_bitwise_under_the_same_seed() {
        let (model, train, test) = setup(5);
        let a = record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 2, 15, 11).unwrap();
        let b = record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 2, 15, 11).unwrap();
        for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
            assert_eq!(sa.noise, sb.noise);
            assert_eq!(sa.weight_delta, sb.weight_delta);
        }
        assert_eq!(a.final_test_outputs, b.final_test_outputs);
        let c = record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 2, 15, 12).unwrap();
        assert_ne!(a.final_test_outputs, c.final_test_outputs);
    }

    #[test]
    fn empty_runs_and_bad_batches_are_rejected() {
        let (model, train, test) = setup(5);
        let run = record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 2, 0, 1).unwrap();
        assert!(matches!(drift_diffusion(&run), Err(InfluenceError::EmptyRun)));
        assert!(matches!(
            record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 0, 5, 1),
            Err(InfluenceError::InvalidBatch { n: 5, b: 0 })
        ));
        assert!(matches!(
            record_sgd_run(&model, &train, &test, Loss::Squared, 0.02, 9, 5, 1),
            Err(InfluenceError::InvalidBatch { n: 5, b: 9 })
        ));
    }

    #[test]
    fn exact_power_laws_fit_exactly() {
        let points: Vec<(f64, f64)> =
            [0.5f64, 1.0, 2.0, 4.0].iter().map(|&x| (x, 3.0 * x.powf(1.7))).collect();
        assert!((log_log_slope(&points) - 1.7).abs() <= 1e-12);
    }
}
