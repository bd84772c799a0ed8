//! The centered-trace gap estimator against fully retrained leave-one-out
//! runs, and the cross-validation risk family whose first-order terms are
//! common to every holdout size.

use influence::{common_first_variation, cv_risk, gap_estimator, influence_matrix, InfluenceError};
use models::{make_dataset, Dataset, GeneratorSpec, Loss, Model};
use ndarray::{Array1, Axis};
use numerics::Vector;
use pathwise_operators::{record_gradient_flow, record_weighted_gradient_flow, TrainingTrajectory};

/// Per-example training losses at the final recorded snapshot.
fn terminal_losses(traj: &TrainingTrajectory) -> Vector {
    let last = traj.num_nodes() - 1;
    let mut model = traj.model_template().clone();
    model
        .set_weights(traj.weights_at_node(last).clone())
        .expect("snapshot weights fit the template");
    let data = traj.train_data();
    Vector::from_iter((0..data.num_examples()).map(|i| {
        let u = model.forward_one(data.input(i)).expect("forward");
        traj.loss_kind().value(u.view(), data.target(i))
    }))
}

/// The centered trace of the influence matrix is a first-order estimate of
/// the retrained leave-one-out degradation. Retraining drops example i and
/// renormalizes the mean over the remaining n − 1 examples, which is the
/// weighting 1 − ν^(i) with the common first-variation direction, so the
/// weighted recorder reproduces the exact leave-one-out flow.
#[test]
fn centered_trace_tracks_the_retrain_loo_gap() {
    let n = 10;
    let horizon = 0.5;
    let steps = 200;
    let seeds = 20u64;
    let mut est_sum = 0.0;
    let mut true_sum = 0.0;
    for seed in 0..seeds {
        let spec = GeneratorSpec::NoisyTeacher {
            num_examples: n,
            input_dim: 3,
            output_dim: 1,
            noise_std: 0.5,
        };
        let data = make_dataset(&spec, 100 + seed).expect("generator");
        let model = Model::linear(3, 1, 500 + seed);
        let traj =
            record_gradient_flow(&model, &data, Loss::Squared, horizon, steps).expect("record");
        let j = influence_matrix(&traj, Loss::Squared).expect("influence");
        est_sum += gap_estimator(&j).value;

        let base = terminal_losses(&traj);
        let mut gap = 0.0;
        for i in 0..n {
            let nu = common_first_variation(n, i, 1).expect("direction");
            let rho = Array1::ones(n) - &nu;
            let loo =
                record_weighted_gradient_flow(&model, &data, Loss::Squared, &rho, horizon, steps)
                    .expect("leave-one-out record");
            gap += terminal_losses(&loo)[i] - base[i];
        }
        true_sum += gap / n as f64;
    }
    let mean_est = est_sum / seeds as f64;
    let mean_true = true_sum / seeds as f64;
    assert!(mean_true > 0.0, "dropping an example should hurt on average");
    let rel = (mean_est - mean_true).abs() / mean_true;
    assert!(
        rel <= 0.30,
        "estimator {mean_est:.5} vs retrained leave-one-out gap {mean_true:.5}: \
         relative error {rel:.3}"
    );
}

/// Leave-one-out and leave-two-out risks share their first-order expansion
/// in the learning rate, so their difference must decay quadratically: a
/// tenfold rate drop shrinks the gap a hundredfold.
#[test]
fn leave_one_and_leave_two_risks_differ_at_second_order() {
    let spec = GeneratorSpec::NoisyTeacher {
        num_examples: 6,
        input_dim: 2,
        output_dim: 1,
        noise_std: 0.3,
    };
    let data = make_dataset(&spec, 41).expect("generator");
    let start = Model::linear(2, 1, 7);

    let risk_gap = |eta: f64| -> f64 {
        let learner = |subset: &Dataset| -> Result<Model, InfluenceError> {
            let mut m = start.clone();
            let grads = m.per_example_gradients(subset, Loss::Squared)?;
            let g = grads.mean_axis(Axis(0)).expect("nonempty subset");
            let w = m.weights() - &(g * eta);
            m.set_weights(w)?;
            Ok(m)
        };
        let l1 = cv_risk(learner, &data, Loss::Squared, 1).expect("leave-one-out risk");
        let l2 = cv_risk(learner, &data, Loss::Squared, 2).expect("leave-two-out risk");
        (l1 - l2).abs()
    };

    let gaps: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|&eta| risk_gap(eta)).collect();
    assert!(gaps[0] > 1e-12, "the two risks should differ at order η²");
    for pair in gaps.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!(
            (50.0..=200.0).contains(&ratio),
            "expected roughly hundredfold decay per tenfold rate drop, got {ratio:.2}"
        );
    }
}
