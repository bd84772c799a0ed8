//! Trajectory recording and snapshot interpolation.
//!
//! All operator computations reconstruct kernels from weights, never from
//! stored kernels: between grid nodes the weights are interpolated and the
//! Jacobian is recomputed there. Interpolating kernels directly would break
//! their positive-semidefinite structure, since K = JJᵀ is quadratic in J.
//!
//! Gradient-flow recordings interpolate with cubic Hermite splines, using
//! the exact node velocities ẇ = −∇Φ(w). Linear interpolation would leave
//! an O(h²) weight error at interval midpoints that caps every downstream
//! quadrature at second order; the spline keeps the whole pipeline fourth
//! order. Discrete trajectories have no continuous velocity and fall back
//! to linear interpolation.

use models::{Dataset, Loss, Model};
use numerics::{ode_rk4, Mat, Vector};
use crate::PathwiseError;

/// How the snapshots were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryKind {
    /// Continuous-time gradient flow integrated with RK4.
    GradientFlow,
    /// Discrete optimizer iterates adopted as snapshots; node k sits at
    /// "time" k so window arithmetic still works.
    Discrete,
}

/// A recorded training run: time grid, weight snapshots, and the output-space
/// quantities (outputs, gradients, losses) evaluated at each node.
#[derive(Clone, Debug)]
pub struct TrainingTrajectory {
    kind: TrajectoryKind,
    times: Vec<f64>,
    weights: Vec<Vector>,
    velocities: Option<Vec<Vector>>,
    outputs: Vec<Vector>,
    gradients: Vec<Vector>,
    losses: Vec<f64>,
    model: Model,
    data: Dataset,
    loss: Loss,
    example_weights: Option<Vector>,
}

/// Slack for the monotone-loss invariant: RK4 keeps gradient-flow loss
/// non-increasing up to integration error, which is far below this at any
/// reasonable step size.
const MONOTONE_SLACK: f64 = 1e-8;

/// Record gradient flow ẇ = −∇Φ(w) over [0, T] on a uniform grid with
/// `steps` intervals. T = 0 produces the single initial node.
pub fn record_gradient_flow(
    model: &Model,
    data: &Dataset,
    loss: Loss,
    horizon: f64,
    steps: usize,
) -> Result<TrainingTrajectory, PathwiseError> {
    record_flow_impl(model, data, loss, None, horizon, steps)
}

/// Gradient flow of the reweighted objective Φ_ρ(w) = (1/n) Σ_a ρ_a φ_a(w).
/// Uniform weights ρ = 1 recover [`record_gradient_flow`]; perturbing one
/// ρ_j gives the finite-difference oracle for influence quantities.
pub fn record_weighted_gradient_flow(
    model: &Model,
    data: &Dataset,
    loss: Loss,
    example_weights: &Vector,
    horizon: f64,
    steps: usize,
) -> Result<TrainingTrajectory, PathwiseError> {
    if example_weights.len() != data.num_examples() {
        return Err(PathwiseError::WeightCountMismatch {
            expected: data.num_examples(),
            got: example_weights.len(),
        });
    }
    record_flow_impl(model, data, loss, Some(example_weights.clone()), horizon, steps)
}

fn record_flow_impl(
    model: &Model,
    data: &Dataset,
    loss: Loss,
    example_weights: Option<Vector>,
    horizon: f64,
    steps: usize,
) -> Result<TrainingTrajectory, PathwiseError> {
    model.forward_stacked(data)?; // dimension check up front
    let w0 = model.weights().clone();
    let mut scratch = model.clone();
    let rho = example_weights.clone();
    let (times, snapshots) = if horizon == 0.0 || steps == 0 {
        (vec![0.0], vec![w0])
    } else {
        let sol = ode_rk4(
            |_t, w: &Vector| {
                scratch.set_weights(w.clone()).expect("weight length fixed");
                weighted_loss_gradient(&scratch, data, loss, rho.as_ref()).mapv(|v| -v)
            },
            &w0,
            0.0,
            horizon,
            steps,
        )
        .map_err(|e| match e {
            numerics::NumericsError::NonFiniteDerivative { time } => {
                PathwiseError::Diverged { time }
            }
            other => PathwiseError::Numerics(other),
        })?;
        (sol.times, sol.states)
    };
    TrainingTrajectory::from_snapshots_impl(
        TrajectoryKind::GradientFlow,
        model,
        data,
        loss,
        example_weights,
        times,
        snapshots,
    )
}

/// Mean gradient of the (optionally reweighted) objective.
fn weighted_loss_gradient(
    model: &Model,
    data: &Dataset,
    loss: Loss,
    rho: Option<&Vector>,
) -> Vector {
    match rho {
        None => model.loss_gradient(data, loss).expect("dims checked"),
        Some(rho) => {
            let per = model
                .per_example_gradients(data, loss)
                .expect("dims checked");
            let mut acc = Vector::zeros(per.ncols());
            for (a, row) in per.rows().into_iter().enumerate() {
                acc.scaled_add(rho[a], &row);
            }
            acc / data.num_examples() as f64
        }
    }
}

impl TrainingTrajectory {
    /// Adopt externally produced iterates (e.g. SGD steps) as a trajectory.
    /// Node k is placed at time k; outputs, gradients, and losses are
    /// recomputed from the snapshots. The monotone-loss invariant applies
    /// only to gradient flow, not here.
    pub fn from_discrete_snapshots(
        model: &Model,
        data: &Dataset,
        loss: Loss,
        snapshots: Vec<Vector>,
    ) -> Result<TrainingTrajectory, PathwiseError> {
        let times = (0..snapshots.len()).map(|k| k as f64).collect();
        TrainingTrajectory::from_snapshots_impl(
            TrajectoryKind::Discrete,
            model,
            data,
            loss,
            None,
            times,
            snapshots,
        )
    }

    fn from_snapshots_impl(
        kind: TrajectoryKind,
        model: &Model,
        data: &Dataset,
        loss: Loss,
        example_weights: Option<Vector>,
        times: Vec<f64>,
        snapshots: Vec<Vector>,
    ) -> Result<TrainingTrajectory, PathwiseError> {
        assert_eq!(times.len(), snapshots.len());
        assert!(!snapshots.is_empty());
        let mut scratch = model.clone();
        let mut outputs = Vec::with_capacity(snapshots.len());
        let mut gradients = Vec::with_capacity(snapshots.len());
        let mut losses = Vec::with_capacity(snapshots.len());
        let mut velocities = if kind == TrajectoryKind::GradientFlow {
            Some(Vec::with_capacity(snapshots.len()))
        } else {
            None
        };
        for w in &snapshots {
            scratch.set_weights(w.clone())?;
            let u = scratch.forward_stacked(data)?.into_vector();
            gradients.push(output_gradient(&u, data, loss, example_weights.as_ref()));
            losses.push(objective_value(&u, data, loss, example_weights.as_ref()));
            outputs.push(u);
            if let Some(v) = velocities.as_mut() {
                v.push(
                    weighted_loss_gradient(&scratch, data, loss, example_weights.as_ref())
                        .mapv(|x| -x),
                );
            }
        }
        if kind == TrajectoryKind::GradientFlow {
            let slack = MONOTONE_SLACK * losses[0].max(1.0);
            for k in 1..losses.len() {
                let rise = losses[k] - losses[k - 1];
                if rise > slack {
                    return Err(PathwiseError::LossIncreased { node: k, rise });
                }
            }
        }
        Ok(TrainingTrajectory {
            kind,
            times,
            weights: snapshots,
            velocities,
            outputs,
            gradients,
            losses,
            model: model.clone(),
            data: data.clone(),
            loss,
            example_weights,
        })
    }

    pub fn kind(&self) -> TrajectoryKind {
        self.kind
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn num_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn weights_at_node(&self, k: usize) -> &Vector {
        &self.weights[k]
    }

    pub fn output_at_node(&self, k: usize) -> &Vector {
        &self.outputs[k]
    }

    /// Output-space gradient g(t_k) = ∇_u Φ, i.e. (1/n)·stack(ρ_a ∇φ_a).
    pub fn gradient_at_node(&self, k: usize) -> &Vector {
        &self.gradients[k]
    }

    pub fn loss_at_node(&self, k: usize) -> f64 {
        self.losses[k]
    }

    pub fn train_data(&self) -> &Dataset {
        &self.data
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn example_weights(&self) -> Option<&Vector> {
        self.example_weights.as_ref()
    }

    /// Grid node closest to t. Errors when t falls outside [0, horizon].
    pub fn node_index_of(&self, t: f64) -> Result<usize, PathwiseError> {
        let horizon = self.horizon();
        let eps = 1e-9 * horizon.max(1.0);
        if t < -eps || t > horizon + eps {
            return Err(PathwiseError::TimeOutsideGrid { time: t, horizon });
        }
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - t).abs().partial_cmp(&(*b - t).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        Ok(k)
    }

    /// Model with weights interpolated at time t: cubic Hermite for flow
    /// recordings (node velocities are exact), linear for discrete ones.
    pub fn model_at(&self, t: f64) -> Result<Model, PathwiseError> {
        let horizon = self.horizon();
        let eps = 1e-9 * horizon.max(1.0);
        if t < -eps || t > horizon + eps {
            return Err(PathwiseError::TimeOutsideGrid { time: t, horizon });
        }
        let t = t.clamp(0.0, horizon);
        // Uniform grids admit direct index arithmetic, but discrete
        // trajectories are uniform too (spacing 1), so binary search is
        // only defensive.
        let idx = match self
            .times
            .binary_search_by(|x| x.partial_cmp(&t).unwrap())
        {
            Ok(k) => {
                let mut m = self.model.clone();
                m.set_weights(self.weights[k].clone())?;
                return Ok(m);
            }
            Err(k) => k,
        };
        let (lo, hi) = (idx - 1, idx);
        let h = self.times[hi] - self.times[lo];
        let alpha = (t - self.times[lo]) / h;
        let w = match &self.velocities {
            Some(vel) => {
                let a2 = alpha * alpha;
                let a3 = a2 * alpha;
                let h00 = 2.0 * a3 - 3.0 * a2 + 1.0;
                let h10 = a3 - 2.0 * a2 + alpha;
                let h01 = -2.0 * a3 + 3.0 * a2;
                let h11 = a3 - a2;
                &self.weights[lo] * h00
                    + &vel[lo] * (h10 * h)
                    + &self.weights[hi] * h01
                    + &vel[hi] * (h11 * h)
            }
            None => &self.weights[lo] * (1.0 - alpha) + &self.weights[hi] * alpha,
        };
        let mut m = self.model.clone();
        m.set_weights(w)?;
        Ok(m)
    }

    /// Training Jacobian J_S at interpolated weights.
    pub fn train_jacobian_at(&self, t: f64) -> Result<Mat, PathwiseError> {
        Ok(self.model_at(t)?.jacobian_stacked(&self.data)?)
    }

    /// Stacked outputs at interpolated weights.
    pub fn output_at(&self, t: f64) -> Result<Vector, PathwiseError> {
        Ok(self.model_at(t)?.forward_stacked(&self.data)?.into_vector())
    }

    /// Output-space objective gradient at interpolated weights.
    pub fn gradient_at(&self, t: f64) -> Result<Vector, PathwiseError> {
        let u = self.output_at(t)?;
        Ok(output_gradient(
            &u,
            &self.data,
            self.loss,
            self.example_weights.as_ref(),
        ))
    }

    /// Diagonal of the output-space loss Hessian B(t) = ∇²_u Φ at
    /// interpolated weights. Both supported losses are coordinate-separable,
    /// so B is diagonal; squared loss gives the constant ρ_a/n per block.
    pub fn b_diag_at(&self, t: f64) -> Result<Vector, PathwiseError> {
        let u = self.output_at(t)?;
        Ok(self.b_diag_for_output(&u))
    }

    pub(crate) fn b_diag_for_output(&self, u: &Vector) -> Vector {
        let (n, p) = (self.data.num_examples(), self.data.output_dim());
        let mut diag = Vector::zeros(n * p);
        for a in 0..n {
            let block = self
                .loss
                .hessian_diag(u.slice(ndarray::s![a * p..(a + 1) * p]), self.data.target(a));
            let rho = self.example_weights.as_ref().map_or(1.0, |w| w[a]);
            diag.slice_mut(ndarray::s![a * p..(a + 1) * p])
                .assign(&(&block * (rho / n as f64)));
        }
        diag
    }

    /// Model template with the initial weights (useful for rebuilding).
    pub fn model_template(&self) -> &Model {
        &self.model
    }
}

fn output_gradient(u: &Vector, data: &Dataset, loss: Loss, rho: Option<&Vector>) -> Vector {
    let (n, p) = (data.num_examples(), data.output_dim());
    let mut g = Vector::zeros(n * p);
    for a in 0..n {
        let r = loss.gradient(u.slice(ndarray::s![a * p..(a + 1) * p]), data.target(a));
        let w = rho.map_or(1.0, |w| w[a]);
        g.slice_mut(ndarray::s![a * p..(a + 1) * p])
            .assign(&(&r * (w / n as f64)));
    }
    g
}

fn objective_value(u: &Vector, data: &Dataset, loss: Loss, rho: Option<&Vector>) -> f64 {
    let (n, p) = (data.num_examples(), data.output_dim());
    let mut total = 0.0;
    for a in 0..n {
        let w = rho.map_or(1.0, |w| w[a]);
        total += w * loss.value(u.slice(ndarray::s![a * p..(a + 1) * p]), data.target(a));
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use models::{make_dataset, Activation, GeneratorSpec};

    fn small_setup() -> (Model, Dataset) {
        let data = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: 4,
                input_dim: 3,
                output_dim: 1,
                noise_std: 0.2,
            },
            3,
        )
        .unwrap();
        let model = Model::mlp(&[3, 6, 1], Activation::Tanh, 4).unwrap();
        (model, data)
    }

    #[test]
    fn zero_horizon_is_single_node() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::Squared, 0.0, 0).unwrap();
        assert_eq!(traj.num_nodes(), 1);
        assert_eq!(traj.times(), &[0.0]);
    }

    #[test]
    fn loss_is_monotone_non_increasing() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::Squared, 2.0, 100).unwrap();
        for k in 1..traj.num_nodes() {
            assert!(traj.loss_at_node(k) <= traj.loss_at_node(k - 1) + 1e-10);
        }
        assert!(traj.loss_at_node(traj.num_nodes() - 1) < traj.loss_at_node(0));
    }

    #[test]
    fn squared_loss_gradient_is_scaled_residual() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 50).unwrap();
        let n = data.num_examples() as f64;
        for k in [0, 25, 50] {
            let residual = traj.output_at_node(k) - &data.targets_flat();
            let expected = &residual / n;
            let diff = traj.gradient_at_node(k) - &expected;
            assert!(numerics::vec_norm(&diff) < 1e-12);
        }
    }

    #[test]
    fn interpolated_endpoints_match_snapshots() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 20).unwrap();
        let m0 = traj.model_at(0.0).unwrap();
        assert_eq!(m0.weights(), traj.weights_at_node(0));
        let m_end = traj.model_at(1.0).unwrap();
        assert_eq!(m_end.weights(), traj.weights_at_node(20));
    }

    #[test]
    fn off_node_interpolation_tracks_a_finer_recording() {
        let (model, data) = small_setup();
        let coarse = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 10).unwrap();
        let fine = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 40).unwrap();
        // Interval midpoints of the coarse grid are nodes of the fine grid.
        // Spline interpolation error at h = 0.1 sits far below the linear
        // interpolant's O(h²) ≈ 1e-3 scale.
        let mut worst = 0.0f64;
        for k in 0..10 {
            let t = 0.05 + 0.1 * k as f64;
            let interp = coarse.model_at(t).unwrap();
            let reference = fine.model_at(t).unwrap();
            let err = numerics::vec_norm(&(interp.weights() - reference.weights()));
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "spline interpolation error {worst}");
    }

    #[test]
    fn times_outside_grid_are_rejected() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 10).unwrap();
        assert!(matches!(
            traj.model_at(1.5),
            Err(PathwiseError::TimeOutsideGrid { .. })
        ));
        assert!(matches!(
            traj.node_index_of(-0.2),
            Err(PathwiseError::TimeOutsideGrid { .. })
        ));
    }

    #[test]
    fn weighted_flow_with_unit_weights_matches_plain_flow() {
        let (model, data) = small_setup();
        let plain = record_gradient_flow(&model, &data, Loss::Squared, 1.0, 40).unwrap();
        let ones = Vector::ones(4);
        let weighted =
            record_weighted_gradient_flow(&model, &data, Loss::Squared, &ones, 1.0, 40).unwrap();
        let diff = plain.weights_at_node(40) - weighted.weights_at_node(40);
        assert!(numerics::vec_norm(&diff) < 1e-14);
    }

    #[test]
    fn zeroed_example_weight_freezes_that_example_in_the_objective() {
        let (model, data) = small_setup();
        let mut rho = Vector::ones(4);
        rho[2] = 0.0;
        let traj =
            record_weighted_gradient_flow(&model, &data, Loss::Squared, &rho, 1.0, 40).unwrap();
        // The leave-one-out flow must coincide with a flow on the reduced
        // dataset up to the 1/n vs 1/(n−1) time rescaling; here we check the
        // cheaper invariant that the gradient ignores example 2.
        let g = traj.gradient_at_node(0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn logcosh_b_diag_is_scaled_sech_squared_of_residual() {
        let (model, data) = small_setup();
        let traj = record_gradient_flow(&model, &data, Loss::LogCosh, 1.0, 40).unwrap();
        let y = Vector::from_iter(data.targets().iter().cloned());
        for &t in &[0.0, 0.5, 1.0] {
            let b = traj.b_diag_at(t).unwrap();
            let u = traj.output_at_node(traj.node_index_of(t).unwrap());
            for ((&bi, &ui), &yi) in b.iter().zip(u.iter()).zip(y.iter()) {
                let want = (1.0 - (ui - yi).tanh().powi(2)) / 4.0;
                assert!((bi - want).abs() < 1e-12);
                assert!(bi <= 0.25 + 1e-12);
            }
        }
    }
}
