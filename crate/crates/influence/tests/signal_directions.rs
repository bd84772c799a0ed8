//! Tail guarantees of the train-only signal basis under a smoothness
//! metric: motion withheld by the oblique projector stays inside the
//! visibility-times-next-eigenvalue budget, and no projector of the same
//! rank can push the whitened window operator below that eigenvalue.

use influence::{graph_laplacian_metric, signal_spectrum, SignalSpectrum};
use models::{make_dataset, Activation, GeneratorSpec, Loss, Model};
use numerics::{eye, seeded_rng, svd, sym_eig, Mat, Vector};
use pathwise_operators::{record_gradient_flow, window_operators, WindowOperators};
use rand::Rng;
use rand_distr::StandardNormal;

fn trained_spectrum() -> (WindowOperators, SignalSpectrum, Mat) {
    let train_spec = GeneratorSpec::NoisyTeacher {
        num_examples: 5,
        input_dim: 2,
        output_dim: 1,
        noise_std: 0.4,
    };
    let train = make_dataset(&train_spec, 51).expect("train generator");
    let test_spec = GeneratorSpec::NoisyTeacher {
        num_examples: 3,
        input_dim: 2,
        output_dim: 1,
        noise_std: 0.4,
    };
    let test = make_dataset(&test_spec, 77).expect("test generator");
    let model = Model::mlp(&[2, 4, 1], Activation::Tanh, 5).expect("mlp");
    let horizon = 0.6;
    let traj =
        record_gradient_flow(&model, &train, Loss::Squared, horizon, 150).expect("record");
    let ops = window_operators(&traj, &test, 0.0, horizon).expect("window operators");
    let metric = graph_laplacian_metric(&train, 0.5);
    let spectrum = signal_spectrum(&ops, &metric).expect("spectrum");
    (ops, spectrum, metric)
}

fn symmetrized(a: &Mat) -> Mat {
    (a + &a.t()) * 0.5
}

/// For every direction h and every rank r, the test-side motion of the
/// withheld component (I − Π_r) h is bounded by the visibility norm times
/// the (r+1)-st metric eigenvalue times the withheld energy hᵀR(I − Π_r)h.
#[test]
fn withheld_directions_lose_no_more_than_the_tail_budget() {
    let (ops, spectrum, metric) = trained_spectrum();
    let np = metric.nrows();
    let mut rng = seeded_rng(2026);
    for r in 0..=np {
        let complement = eye(np) - &spectrum.projector_oblique(r);
        let tail = spectrum.tail_value(r);
        for draw in 0..100 {
            let h = Vector::from_shape_fn(np, |_| rng.sample::<f64, _>(StandardNormal));
            let withheld = complement.dot(&h);
            let lost = ops.g.dot(&withheld);
            let lhs = lost.dot(&lost);
            let rhs = tail * withheld.dot(&metric.dot(&withheld)) + 1e-8;
            assert!(
                lhs <= rhs,
                "rank {r}, draw {draw}: lost motion {lhs:.6e} exceeds the budget {rhs:.6e}"
            );
        }
    }
}

/// Courant–Fischer floor: whatever rank-r projector is chosen, the
/// complement of the whitened operator keeps an eigenvalue at least
/// λ_{r+1}, and the spectral projector attains that floor exactly.
#[test]
fn random_projectors_never_beat_the_spectral_tail() {
    let (_ops, spectrum, _metric) = trained_spectrum();
    let np = spectrum.eigenvalues.len();
    let c_r = spectrum
        .basis
        .dot(&Mat::from_diag(&spectrum.eigenvalues))
        .dot(&spectrum.basis.t());
    let mut rng = seeded_rng(99);
    for r in 1..=3usize.min(np - 1) {
        let lambda_next = spectrum.eigenvalues[r];
        let rest = eye(np) - &spectrum.projector_whitened(r);
        let achieved = sym_eig(&symmetrized(&rest.dot(&c_r).dot(&rest)))
            .expect("eigendecomposition")
            .eigenvalues[0];
        assert!(
            (achieved - lambda_next).abs() <= 1e-9 * (1.0 + lambda_next.abs()),
            "rank {r}: the spectral projector should attain the tail exactly, \
             got {achieved:.9e} vs {lambda_next:.9e}"
        );
        for draw in 0..50 {
            let gauss = Mat::from_shape_fn((np, r), |_| rng.sample::<f64, _>(StandardNormal));
            let basis = svd(&gauss).u;
            let q = basis.dot(&basis.t());
            let comp = eye(np) - &q;
            let worst = sym_eig(&symmetrized(&comp.dot(&c_r).dot(&comp)))
                .expect("eigendecomposition")
                .eigenvalues[0];
            assert!(
                worst >= lambda_next - 1e-9,
                "rank {r}, draw {draw}: a random projector beat the floor, \
                 {worst:.9e} < {lambda_next:.9e}"
            );
        }
    }
}
