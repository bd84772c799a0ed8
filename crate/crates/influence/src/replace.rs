//! Exact displacement accounting for replace-one retraining.
//!
//! Train twice from the same initialization, once on S and once on S' that
//! swaps example i for a fresh z'. Because the terminal test outputs of each
//! run satisfy U_Q(T) = U_Q(w₀) − G·g(0) exactly, subtracting the two runs
//! splits the prediction shift into two named pieces:
//!
//!   U_Q^S(T) − U_Q^{S'}(T) = −G_S^{(i)} δ_i − (G_S − G_{S'}) g_{S'}(0),
//!
//! where δ_i = (1/n)(∇φ(F(w₀, z_i)) − ∇φ(F(w₀, z'))) is the initial-gradient
//! difference of the replaced example (the only block of g(0) that moves)
//! and G^{(i)} is the i-th column block of the test transfer operator. The
//! first term is the replaced example's direct effect; the second is the
//! drift of the transfer operator between neighboring datasets. A triangle
//! inequality on the two terms gives a run-specific stability bound.

use models::Dataset;
use numerics::{op_norm, vec_norm, Mat, Vector};
use pathwise_operators::{window_operators_with, TrainingTrajectory, WindowOptions};

use crate::InfluenceError;

/// Exact two-term split of the test-prediction shift under replace-one.
#[derive(Clone, Debug)]
pub struct ReplaceOneReport {
    /// −G_S^{(i)} δ_i − (G_S − G_{S'}) g_{S'}(0): the reconstructed shift.
    pub total: Vector,
    /// −G_S^{(i)} δ_i: direct effect of the replaced example's gradient.
    pub initial_term: Vector,
    /// −(G_S − G_{S'}) g_{S'}(0): transfer-operator drift between datasets.
    pub drift_term: Vector,
    /// δ_i itself (p entries).
    pub delta: Vector,
    /// Terminal U_Q^S(T) − U_Q^{S'}(T) read off the recorded trajectories;
    /// agrees with `total` up to quadrature error.
    pub recorded: Vector,
    /// ‖G_S^{(i)}‖_op · ‖δ_i‖.
    pub initial_term_bound: f64,
    /// ‖G_S − G_{S'}‖_op · ‖g_{S'}(0)‖.
    pub drift_term_bound: f64,
    /// Sum of the two term bounds; dominates ‖recorded‖ up to quadrature.
    pub bound: f64,
}

fn rows_equal(a: &Mat, b: &Mat, row: usize) -> bool {
    a.row(row)
        .iter()
        .zip(b.row(row).iter())
        .all(|(x, y)| x == y)
}

/// Check that the two runs are a legitimate replace-one pair: identical
/// initialization, loss, grid, and data except possibly at index i.
fn validate_pair(
    traj_s: &TrainingTrajectory,
    traj_sp: &TrainingTrajectory,
    i: usize,
) -> Result<(), InfluenceError> {
    let (a, b) = (traj_s.train_data(), traj_sp.train_data());
    let n = a.num_examples();
    if i >= n {
        return Err(InfluenceError::ExampleOutOfRange { index: i, n });
    }
    if b.num_examples() != n || b.input_dim() != a.input_dim() || b.output_dim() != a.output_dim()
    {
        return Err(InfluenceError::DatasetMismatch {
            reason: "datasets have different shapes".into(),
        });
    }
    let differing: Vec<usize> = (0..n)
        .filter(|&j| {
            !(rows_equal(a.inputs(), b.inputs(), j) && rows_equal(a.targets(), b.targets(), j))
        })
        .collect();
    if differing.iter().any(|&j| j != i) {
        return Err(InfluenceError::DatasetMismatch {
            reason: format!("examples {differing:?} differ, expected only index {i}"),
        });
    }
    if traj_s.loss_kind() != traj_sp.loss_kind() {
        return Err(InfluenceError::DatasetMismatch { reason: "loss kinds differ".into() });
    }
    let w0_diff = traj_s
        .weights_at_node(0)
        .iter()
        .zip(traj_sp.weights_at_node(0).iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    if w0_diff > 0.0 {
        return Err(InfluenceError::DatasetMismatch {
            reason: format!("initializations differ by {w0_diff:.3e}"),
        });
    }
    if traj_s.times() != traj_sp.times() {
        return Err(InfluenceError::DatasetMismatch { reason: "time grids differ".into() });
    }
    Ok(())
}

/// Split the replace-one test displacement into its initial-gradient and
/// operator-drift terms, with the triangle-inequality stability bound.
pub fn replace_one_displacement(
    traj_s: &TrainingTrajectory,
    traj_sp: &TrainingTrajectory,
    test: &Dataset,
    i: usize,
) -> Result<ReplaceOneReport, InfluenceError> {
    validate_pair(traj_s, traj_sp, i)?;
    let p = traj_s.train_data().output_dim();
    let horizon = traj_s.horizon();
    let opts = WindowOptions::default();
    let ops_s = window_operators_with(traj_s, test, 0.0, horizon, opts)?;
    let ops_sp = window_operators_with(traj_sp, test, 0.0, horizon, opts)?;

    // δ_i from the initial output-space gradients of the mean loss: only
    // block i can differ (same w₀ and identical data elsewhere).
    let g0_s = traj_s.gradient_at_node(0);
    let g0_sp = traj_sp.gradient_at_node(0);
    let delta = (&g0_s.slice(ndarray::s![i * p..(i + 1) * p])
        - &g0_sp.slice(ndarray::s![i * p..(i + 1) * p]))
        .to_owned();

    let g_block = ops_s.g.slice(ndarray::s![.., i * p..(i + 1) * p]).to_owned();
    let initial_term = g_block.dot(&delta).mapv(|v| -v);
    let g_diff = &ops_s.g - &ops_sp.g;
    let drift_term = g_diff.dot(g0_sp).mapv(|v| -v);
    let total = &initial_term + &drift_term;

    let last = traj_s.num_nodes() - 1;
    let mut model_s = traj_s.model_template().clone();
    model_s.set_weights(traj_s.weights_at_node(last).clone())?;
    let mut model_sp = traj_sp.model_template().clone();
    model_sp.set_weights(traj_sp.weights_at_node(last).clone())?;
    let recorded = (&model_s.forward_stacked(test)?.into_vector()
        - &model_sp.forward_stacked(test)?.into_vector())
        .to_owned();

    let initial_term_bound = op_norm(&g_block) * vec_norm(&delta);
    let drift_term_bound = op_norm(&g_diff) * vec_norm(&g0_sp);
    Ok(ReplaceOneReport {
        total,
        initial_term,
        drift_term,
        delta,
        recorded,
        initial_term_bound,
        drift_term_bound,
        bound: initial_term_bound + drift_term_bound,
    })
}

/// ‖U_Q^A(T) − U_Q^B(T)‖ for any pair of recorded runs: the raw material
/// for empirical replace-k stability curves.
pub fn paired_displacement_norm(
    traj_a: &TrainingTrajectory,
    traj_b: &TrainingTrajectory,
    test: &Dataset,
) -> Result<f64, InfluenceError> {
    let last_a = traj_a.num_nodes() - 1;
    let last_b = traj_b.num_nodes() - 1;
    let mut model_a = traj_a.model_template().clone();
    model_a.set_weights(traj_a.weights_at_node(last_a).clone())?;
    let mut model_b = traj_b.model_template().clone();
    model_b.set_weights(traj_b.weights_at_node(last_b).clone())?;
    let diff = &model_a.forward_stacked(test)?.into_vector()
        - &model_b.forward_stacked(test)?.into_vector();
    Ok(vec_norm(&diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use models::{make_dataset, GeneratorSpec, Loss, Model};
    use pathwise_operators::record_gradient_flow;

    #[test]
    fn identical_datasets_give_exactly_zero() {
        let data = make_dataset(
            &GeneratorSpec::LinearGaussian { num_examples: 4, input_dim: 2, output_dim: 1 },
            3,
        )
        .unwrap();
        let test = make_dataset(
            &GeneratorSpec::LinearGaussian { num_examples: 3, input_dim: 2, output_dim: 1 },
            4,
        )
        .unwrap();
        let model = Model::linear(2, 1, 7);
        let traj_a = record_gradient_flow(&model, &data, Loss::Squared, 0.5, 40).unwrap();
        let traj_b = record_gradient_flow(&model, &data, Loss::Squared, 0.5, 40).unwrap();
        let report = replace_one_displacement(&traj_a, &traj_b, &test, 1).unwrap();
        assert_eq!(vec_norm(&report.delta), 0.0);
        assert_eq!(vec_norm(&report.total), 0.0);
        assert_eq!(vec_norm(&report.recorded), 0.0);
        assert_eq!(paired_displacement_norm(&traj_a, &traj_b, &test).unwrap(), 0.0);
    }

    #[test]
    fn differing_outside_the_declared_index_is_rejected() {
        let data = make_dataset(
            &GeneratorSpec::LinearGaussian { num_examples: 4, input_dim: 2, output_dim: 1 },
            3,
        )
        .unwrap();
        let test = data.clone();
        let other = {
            let mut t = data.target(2).to_owned();
            t[0] += 1.0;
            data.replace_example(2, data.input(2), t.view()).unwrap()
        };
        let model = Model::linear(2, 1, 7);
        let traj_a = record_gradient_flow(&model, &data, Loss::Squared, 0.3, 20).unwrap();
        let traj_b = record_gradient_flow(&model, &other, Loss::Squared, 0.3, 20).unwrap();
        assert!(matches!(
            replace_one_displacement(&traj_a, &traj_b, &test, 1),
            Err(InfluenceError::DatasetMismatch { .. })
        ));
        // Declaring the right index succeeds.
        assert!(replace_one_displacement(&traj_a, &traj_b, &test, 2).is_ok());
    }

    #[test]
    fn different_initializations_are_rejected() {
        let data = make_dataset(
            &GeneratorSpec::LinearGaussian { num_examples: 3, input_dim: 2, output_dim: 1 },
            3,
        )
        .unwrap();
        let traj_a =
            record_gradient_flow(&Model::linear(2, 1, 7), &data, Loss::Squared, 0.3, 20).unwrap();
        let traj_b =
            record_gradient_flow(&Model::linear(2, 1, 8), &data, Loss::Squared, 0.3, 20).unwrap();
        assert!(matches!(
            replace_one_displacement(&traj_a, &traj_b, &data, 0),
            Err(InfluenceError::DatasetMismatch { .. })
        ));
    }
}
