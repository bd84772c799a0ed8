//! End-to-end tour of the window-operator pipeline: record a gradient flow,
//! build the operator bundle on a window, and exercise the identities the
//! bundle is supposed to satisfy.
//!
//! Run with: cargo run --example window_demo

use models::{make_dataset, Activation, GeneratorSpec, Loss, Model};
use numerics::{vec_norm, Vector};
use pathwise_operators::{
    dissipation_identity_check, dual_solve_w, four_cell_decomposition, predict_test_displacement,
    record_gradient_flow, window_operators,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let train = make_dataset(
        &GeneratorSpec::NoisyTeacher {
            num_examples: 8,
            input_dim: 4,
            output_dim: 1,
            noise_std: 0.3,
        },
        42,
    )?;
    let test = make_dataset(
        &GeneratorSpec::LinearGaussian {
            num_examples: 5,
            input_dim: 4,
            output_dim: 1,
        },
        43,
    )?;
    let model = Model::mlp(&[4, 12, 1], Activation::Tanh, 44)?;

    let horizon = 1.5;
    let traj = record_gradient_flow(&model, &train, Loss::Squared, horizon, 300)?;
    println!(
        "recorded {} nodes, loss {:.6} -> {:.6}",
        traj.num_nodes(),
        traj.loss_at_node(0),
        traj.loss_at_node(traj.num_nodes() - 1)
    );

    let ops = window_operators(&traj, &test, 0.0, horizon)?;
    println!("{}", ops.to_json());

    let dissipation_residual = dissipation_identity_check(&traj, &ops)?;
    println!("dissipation identity residual: {dissipation_residual:.3e}");

    let kt = traj.node_index_of(horizon)?;
    let du = traj.output_at_node(kt) - traj.output_at_node(0);
    let predicted = predict_test_displacement(&ops, &du);
    let m0 = traj.model_at(0.0)?;
    let mt = traj.model_at(horizon)?;
    let actual = &mt.forward_stacked(&test)?.into_vector() - &m0.forward_stacked(&test)?.into_vector();
    println!(
        "test displacement: predicted norm {:.4}, actual norm {:.4}, gap {:.3e}",
        vec_norm(&predicted),
        vec_norm(&actual),
        vec_norm(&(&predicted - &actual))
    );

    let h = Vector::from_shape_fn(ops.w.nrows(), |i| (i as f64 * 0.7).sin());
    let dense = ops.w.dot(&h);
    let dual = dual_solve_w(&traj, &h, 0.0, horizon)?;
    println!(
        "matrix-free W·h agreement: {:.3e} (dense norm {:.4})",
        vec_norm(&(&dense - &dual)),
        vec_norm(&dense)
    );

    let cells = four_cell_decomposition(&traj, &ops, &test)?;
    println!(
        "error split: bias {:.4}, reservoir noise {:.3e}, signal noise {:.4}, recomposition {:.3e}",
        vec_norm(&cells.bias),
        vec_norm(&cells.reservoir_noise),
        vec_norm(&cells.signal_noise),
        cells.recomposition_residual
    );
    Ok(())
}
