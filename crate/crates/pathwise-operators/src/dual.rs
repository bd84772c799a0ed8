//! Matrix-free evaluation of W h, Gᵀξ, and Dᵀη by dual (adjoint) ODE solves.
//!
//! None of these routines ever materializes an np×np kernel: every kernel
//! action is two thin Jacobian products, J_S·(J_Sᵀ·v). The pattern is one
//! forward sweep transporting the probe vector with ż = −B K_SS z, then one
//! backward sweep ṁ = (B K_SS)ᵀ m − S(τ) from m(T) = 0, whose value at s is
//! the integral ∫ 𝒫(τ,s)ᵀ S(τ) dτ.

use models::Dataset;
use ndarray::{concatenate, Axis};
use numerics::{ode_rk4, Vector};

use crate::{PathwiseError, TrainingTrajectory};

/// Kernel and loss-curvature data at one time point, built on demand from
/// interpolated weights.
struct Snapshot {
    j: numerics::Mat,
    b: Vector,
}

fn snapshot_at(traj: &TrainingTrajectory, tau: f64) -> Snapshot {
    let model = traj.model_at(tau).expect("tau inside recorded window");
    let j = model
        .jacobian_stacked(traj.train_data())
        .expect("train dims fixed at recording time");
    let u = model
        .forward_stacked(traj.train_data())
        .expect("train dims fixed at recording time")
        .into_vector();
    let b = traj.b_diag_for_output(&u);
    Snapshot { j, b }
}

impl Snapshot {
    /// K_SS v = J (Jᵀ v).
    fn kernel(&self, v: &Vector) -> Vector {
        self.j.dot(&self.j.t().dot(v))
    }

    /// (B K_SS)ᵀ m = K_SS (b ⊙ m).
    fn adjoint(&self, m: &Vector) -> Vector {
        self.kernel(&(&self.b * m))
    }
}

fn window_nodes(
    traj: &TrainingTrajectory,
    s: f64,
    t: f64,
) -> Result<(usize, usize), PathwiseError> {
    Ok((traj.node_index_of(s)?, traj.node_index_of(t)?))
}

/// W h without forming W: forward-transport h, then integrate the adjoint
/// with source K_SS z(τ) backward over the window. The transported probe
/// rides along in the backward state so the source is available at every
/// RK4 stage time.
pub fn dual_solve_w(
    traj: &TrainingTrajectory,
    h: &Vector,
    s: f64,
    t: f64,
) -> Result<Vector, PathwiseError> {
    let (ks, kt) = window_nodes(traj, s, t)?;
    let np = h.len();
    if kt <= ks {
        return Ok(Vector::zeros(np));
    }
    let times = traj.times();
    let (t_s, t_t) = (times[ks], times[kt]);
    let steps = kt - ks;

    let forward = ode_rk4(
        |tau, z: &Vector| {
            let snap = snapshot_at(traj, tau);
            -(&snap.b * &snap.kernel(z))
        },
        h,
        t_s,
        t_t,
        steps,
    )?;
    let z_end = forward.final_state().clone();

    let joint0 = concatenate(Axis(0), &[z_end.view(), Vector::zeros(np).view()])
        .expect("concatenate 1-d");
    let backward = ode_rk4(
        |tau, state: &Vector| {
            let z = state.slice(ndarray::s![..np]).to_owned();
            let m = state.slice(ndarray::s![np..]).to_owned();
            let snap = snapshot_at(traj, tau);
            let kz = snap.kernel(&z);
            let dz = -(&snap.b * &kz);
            let dm = &snap.adjoint(&m) - &kz;
            concatenate(Axis(0), &[dz.view(), dm.view()]).expect("concatenate 1-d")
        },
        &joint0,
        t_t,
        t_s,
        steps,
    )?;
    Ok(backward.final_state().slice(ndarray::s![np..]).to_owned())
}

/// Gᵀ ξ without forming G: adjoint solve with source J_S(τ)·(J_Q(τ)ᵀ ξ).
pub fn dual_solve_g_adjoint(
    traj: &TrainingTrajectory,
    test: &Dataset,
    xi: &Vector,
    s: f64,
    t: f64,
) -> Result<Vector, PathwiseError> {
    let (ks, kt) = window_nodes(traj, s, t)?;
    let np = traj.output_at_node(0).len();
    if kt <= ks {
        return Ok(Vector::zeros(np));
    }
    let times = traj.times();
    let backward = ode_rk4(
        |tau, m: &Vector| {
            let snap = snapshot_at(traj, tau);
            let model = traj.model_at(tau).expect("tau inside recorded window");
            let jq = model.jacobian_stacked(test).expect("test dims fixed");
            let source = snap.j.dot(&jq.t().dot(xi));
            &snap.adjoint(m) - &source
        },
        &Vector::zeros(np),
        times[kt],
        times[ks],
        kt - ks,
    )?;
    Ok(backward.final_state().clone())
}

/// Dᵀ η without forming D: adjoint solve with source K_SS(τ) η.
pub fn dual_solve_d_adjoint(
    traj: &TrainingTrajectory,
    eta: &Vector,
    s: f64,
    t: f64,
) -> Result<Vector, PathwiseError> {
    let (ks, kt) = window_nodes(traj, s, t)?;
    let np = eta.len();
    if kt <= ks {
        return Ok(Vector::zeros(np));
    }
    let times = traj.times();
    let backward = ode_rk4(
        |tau, m: &Vector| {
            let snap = snapshot_at(traj, tau);
            &snap.adjoint(m) - &snap.kernel(eta)
        },
        &Vector::zeros(np),
        times[kt],
        times[ks],
        kt - ks,
    )?;
    Ok(backward.final_state().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{record_gradient_flow, window_operators};
    use models::{make_dataset, GeneratorSpec, Loss, Model};
    use numerics::vec_norm;

    fn setup() -> (TrainingTrajectory, Dataset) {
        let train = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: 5,
                input_dim: 3,
                output_dim: 1,
                noise_std: 0.2,
            },
            7,
        )
        .unwrap();
        let test = make_dataset(
            &GeneratorSpec::LinearGaussian {
                num_examples: 4,
                input_dim: 3,
                output_dim: 1,
            },
            8,
        )
        .unwrap();
        let model = Model::mlp(&[3, 6, 1], models::Activation::Tanh, 9).unwrap();
        let traj = record_gradient_flow(&model, &train, Loss::Squared, 1.0, 200).unwrap();
        (traj, test)
    }

    #[test]
    fn dual_w_matches_dense() {
        let (traj, test) = setup();
        let ops = window_operators(&traj, &test, 0.0, 1.0).unwrap();
        let h = Vector::from_vec(vec![0.7, -0.3, 0.5, 0.1, -0.9]);
        let dense = ops.w.dot(&h);
        let dual = dual_solve_w(&traj, &h, 0.0, 1.0).unwrap();
        let err = vec_norm(&(&dense - &dual)) / vec_norm(&dense).max(1e-12);
        assert!(err <= 1e-5, "dual W mismatch {err}");
    }

    #[test]
    fn dual_g_adjoint_matches_dense() {
        let (traj, test) = setup();
        let ops = window_operators(&traj, &test, 0.0, 1.0).unwrap();
        let xi = Vector::from_vec(vec![0.4, -1.1, 0.2, 0.8]);
        let dense = ops.g.t().dot(&xi);
        let dual = dual_solve_g_adjoint(&traj, &test, &xi, 0.0, 1.0).unwrap();
        let err = vec_norm(&(&dense - &dual)) / vec_norm(&dense).max(1e-12);
        assert!(err <= 1e-5, "dual Gᵀ mismatch {err}");
    }

    #[test]
    fn dual_d_adjoint_matches_dense() {
        let (traj, test) = setup();
        let ops = window_operators(&traj, &test, 0.0, 1.0).unwrap();
        let eta = Vector::from_vec(vec![-0.2, 0.9, 0.3, -0.5, 0.6]);
        let dense = ops.d.t().dot(&eta);
        let dual = dual_solve_d_adjoint(&traj, &eta, 0.0, 1.0).unwrap();
        let err = vec_norm(&(&dense - &dual)) / vec_norm(&dense).max(1e-12);
        assert!(err <= 1e-5, "dual Dᵀ mismatch {err}");
    }

    #[test]
    fn empty_window_returns_zero() {
        let (traj, _) = setup();
        let h = Vector::from_vec(vec![1.0; 5]);
        let out = dual_solve_w(&traj, &h, 0.5, 0.5).unwrap();
        assert_eq!(vec_norm(&out), 0.0);
    }
}
