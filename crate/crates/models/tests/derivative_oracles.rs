//! Derivative correctness against finite-difference oracles across a sweep of
//! random model/data configurations, plus the determinism contract.

use models::{make_dataset, Activation, Dataset, GeneratorSpec, Loss, Model};
use ndarray::Axis;
use numerics::{fro_norm, seeded_rng, vec_norm, Mat, Vector};
use rand::Rng;

fn random_model(rng: &mut impl Rng, input_dim: usize, output_dim: usize, seed: u64) -> Model {
    match rng.random_range(0..3) {
        0 => Model::linear(input_dim, output_dim, seed),
        1 => Model::mlp(
            &[input_dim, rng.random_range(2..8), output_dim],
            Activation::Tanh,
            seed,
        )
        .unwrap(),
        _ => Model::mlp(
            &[
                input_dim,
                rng.random_range(2..6),
                rng.random_range(2..6),
                output_dim,
            ],
            Activation::Relu,
            seed,
        )
        .unwrap(),
    }
}

/// Central finite differences of the stacked outputs, together with a
/// validity mask. Central differences only estimate a derivative where the
/// map is smooth across the whole stencil; a ReLU unit whose preactivation
/// changes sign inside [w−h·e_c, w+h·e_c] makes the quotient meaningless for
/// that example's rows. Sign patterns at the stencil endpoints detect
/// exactly those flips, with no threshold to tune.
fn fd_stacked_jacobian(model: &Model, data: &Dataset, h: f64) -> (Mat, Mat) {
    let d = model.num_weights();
    let (n, p) = (data.num_examples(), model.output_dim());
    let mut j = Mat::zeros((n * p, d));
    let mut valid = Mat::ones((n * p, d));
    let base = model.weights().clone();
    let mut m = model.clone();
    for c in 0..d {
        let mut up = base.clone();
        let mut dn = base.clone();
        up[c] += h;
        dn[c] -= h;
        m.set_weights(up).unwrap();
        let fu = m.forward_stacked(data).unwrap().into_vector();
        let pattern_up = per_example_patterns(&m, data);
        m.set_weights(dn).unwrap();
        let fdn = m.forward_stacked(data).unwrap().into_vector();
        let pattern_dn = per_example_patterns(&m, data);
        for i in 0..n {
            let stable = pattern_up[i] == pattern_dn[i];
            for k in 0..p {
                let r = i * p + k;
                j[(r, c)] = (fu[r] - fdn[r]) / (2.0 * h);
                if !stable {
                    valid[(r, c)] = 0.0;
                }
            }
        }
    }
    (j, valid)
}

fn per_example_patterns(model: &Model, data: &Dataset) -> Vec<Vec<bool>> {
    (0..data.num_examples())
        .map(|i| {
            model
                .hidden_preactivations(data.input(i))
                .unwrap()
                .iter()
                .flat_map(|z| z.iter().map(|&v| v > 0.0))
                .collect()
        })
        .collect()
}

/// 50 random configurations: analytic Jacobians stay within 1e−5 relative of
/// central finite differences wherever the stencil is differentiable.
#[test]
fn jacobians_match_finite_differences_over_config_sweep() {
    let mut rng = seeded_rng(2024);
    for trial in 0..50u64 {
        let input_dim = rng.random_range(1..6);
        let output_dim = rng.random_range(1..4);
        let n = rng.random_range(1..5);
        let model = random_model(&mut rng, input_dim, output_dim, 100 + trial);
        let data = make_dataset(
            &GeneratorSpec::LinearGaussian {
                num_examples: n,
                input_dim,
                output_dim,
            },
            200 + trial,
        )
        .unwrap();
        let analytic = model.jacobian_stacked(&data).unwrap();
        let (numeric, valid) = fd_stacked_jacobian(&model, &data, 1e-5);
        let masked = (&analytic - &numeric) * &valid;
        let scale = fro_norm(&numeric).max(1.0);
        let rel = fro_norm(&masked) / scale;
        assert!(rel <= 1e-5, "trial {trial}: relative error {rel}");
        let skipped = valid.len() as f64 - valid.sum();
        assert!(
            skipped <= (valid.len() / 10) as f64,
            "trial {trial}: too many kink-straddling entries to be a meaningful check"
        );
    }
}

#[test]
fn per_example_gradient_mean_equals_full_batch_gradient() {
    let mut rng = seeded_rng(77);
    for trial in 0..20u64 {
        let input_dim = rng.random_range(2..5);
        let output_dim = rng.random_range(1..4);
        let n = rng.random_range(2..7);
        let model = random_model(&mut rng, input_dim, output_dim, 300 + trial);
        let data = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: n,
                input_dim,
                output_dim,
                noise_std: 0.5,
            },
            400 + trial,
        )
        .unwrap();
        for loss in [Loss::Squared, Loss::LogCosh] {
            let per = model.per_example_gradients(&data, loss).unwrap();
            let mean = &per.sum_axis(Axis(0)) / n as f64;
            let full = model.loss_gradient(&data, loss).unwrap();
            assert!(
                vec_norm(&(&mean - &full)) <= 1e-10,
                "trial {trial} loss {loss:?}"
            );
        }
    }
}

#[test]
fn zero_residual_gives_zero_gradients() {
    let model = Model::mlp(&[2, 4, 2], Activation::Tanh, 5).unwrap();
    // Build targets equal to the model's own outputs: residuals vanish.
    let base = make_dataset(
        &GeneratorSpec::LinearGaussian {
            num_examples: 3,
            input_dim: 2,
            output_dim: 2,
        },
        6,
    )
    .unwrap();
    let outputs = model.forward_stacked(&base).unwrap();
    let mut targets = Mat::zeros((3, 2));
    for i in 0..3 {
        targets.row_mut(i).assign(&outputs.block(i));
    }
    let data = Dataset::new(
        base.inputs().clone(),
        targets,
        None,
        base.meta().clone(),
    )
    .unwrap();
    let per = model.per_example_gradients(&data, Loss::Squared).unwrap();
    assert!(per.iter().all(|&g| g == 0.0));
}

/// Exact Hessian-vector products agree with finite differences of the
/// gradient for both losses and both architectures.
#[test]
fn hvp_oracle_sweep() {
    let mut rng = seeded_rng(88);
    for trial in 0..10u64 {
        let input_dim = rng.random_range(2..5);
        let output_dim = rng.random_range(1..3);
        let n = rng.random_range(2..5);
        let model = random_model(&mut rng, input_dim, output_dim, 500 + trial);
        let data = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: n,
                input_dim,
                output_dim,
                noise_std: 0.4,
            },
            600 + trial,
        )
        .unwrap();
        let d = model.num_weights();
        let v = Vector::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
        let h = 1e-5;
        let mut up = model.clone();
        let mut dn = model.clone();
        up.set_weights(model.weights() + &(&v * h)).unwrap();
        dn.set_weights(model.weights() - &(&v * h)).unwrap();
        // The FD-of-gradient stencil needs the loss to be C² along v: a ReLU
        // preactivation changing sign between the endpoints invalidates the
        // quotient, and the sign patterns detect that exactly.
        if per_example_patterns(&up, &data) != per_example_patterns(&dn, &data) {
            continue;
        }
        for loss in [Loss::Squared, Loss::LogCosh] {
            let hvp = model.loss_hvp(&data, loss, &v).unwrap();
            let fd = (&up.loss_gradient(&data, loss).unwrap()
                - &dn.loss_gradient(&data, loss).unwrap())
                / (2.0 * h);
            let rel = vec_norm(&(&hvp - &fd)) / vec_norm(&fd).max(1e-10);
            assert!(rel <= 1e-5, "trial {trial} loss {loss:?}: {rel}");
        }
    }
}

#[test]
fn dataset_generation_replays_bitwise() {
    for spec in [
        GeneratorSpec::LinearGaussian {
            num_examples: 8,
            input_dim: 3,
            output_dim: 2,
        },
        GeneratorSpec::NoisyTeacher {
            num_examples: 8,
            input_dim: 3,
            output_dim: 2,
            noise_std: 1.3,
        },
        GeneratorSpec::ModularArithmetic {
            modulus: 5,
            op: models::ModularOp::Add,
            train_fraction: 0.6,
        },
        GeneratorSpec::NoisyFunction1d {
            num_examples: 16,
            noise_std: 0.2,
        },
    ] {
        let a = make_dataset(&spec, 12345).unwrap();
        let b = make_dataset(&spec, 12345).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "spec {spec:?}");
    }
}
