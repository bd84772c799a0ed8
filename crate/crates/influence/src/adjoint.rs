//! Backward adjoint solves and the influence matrix.
//!
//! Downweighting example j in the training objective by an infinitesimal
//! amount perturbs the whole weight path. The sensitivity of any terminal
//! functional ψ(U_Q(w(T))) to that perturbation is computable from a single
//! backward solve of the linear adjoint equation
//!
//!   ∂_τ p(τ) = ∇²L_S(w(τ)) p(τ),   p(T) = J_Q(w(T))ᵀ ∇ψ(U_Q(w(T))),
//!
//! integrated from τ = T down to τ = 0 along the recorded trajectory,
//! followed by the quadrature (1/n)∫₀ᵀ ⟨p(τ), ∇ℓ_j(w(τ))⟩ dτ. Taking ψ to
//! be the terminal loss on train example i yields the influence matrix
//! entry J_ij. The solve is dual to a forward sensitivity equation in
//! weight space; [`forward_sensitivity`] provides that route so the two can
//! be checked against each other.
//!
//! Hessians are assembled densely from exact Hessian-vector products at
//! each node of the time grid, which is why the weight dimension is capped.

use models::{Loss, Model};
use numerics::{Mat, Vector};
use pathwise_operators::TrainingTrajectory;

use crate::InfluenceError;

/// Upper bound on the weight dimension for dense per-snapshot Hessians.
/// Each right-hand-side evaluation assembles a d×d matrix from d exact
/// Hessian-vector products; past a few hundred weights that cost dominates
/// everything else, and the diagnostics in this crate target small models.
pub const DENSE_HESSIAN_CAP: usize = 256;

/// The influence matrix J of a recorded run: J[(i, j)] is the derivative of
/// the terminal loss on train example i with respect to an infinitesimal
/// downweighting of train example j in the objective.
#[derive(Clone, Debug)]
pub struct InfluenceMatrix {
    matrix: Mat,
    horizon: f64,
    psi: Loss,
}

impl InfluenceMatrix {
    /// The n×n matrix itself, rows = evaluated example, cols = downweighted.
    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    /// Number of training examples.
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Training horizon the matrix was integrated over.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Terminal loss functional the rows differentiate.
    pub fn test_loss(&self) -> Loss {
        self.psi
    }

    /// Self-influence scores J_ii.
    pub fn diagonal(&self) -> Vector {
        self.matrix.diag().to_owned()
    }
}

/// An adjoint (or forward-sensitivity) path sampled at the trajectory's
/// time nodes.
#[derive(Clone, Debug)]
pub struct AdjointPath {
    times: Vec<f64>,
    values: Vec<Vector>,
}

impl AdjointPath {
    /// Node times, ascending; identical to the trajectory grid.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Path values, index-aligned with [`Self::times`].
    pub fn values(&self) -> &[Vector] {
        &self.values
    }

    /// Value at node k.
    pub fn value_at_node(&self, k: usize) -> &Vector {
        &self.values[k]
    }

    /// Value at the final node.
    pub fn terminal(&self) -> &Vector {
        self.values.last().expect("path has at least one node")
    }

    /// Value at the first node.
    pub fn initial(&self) -> &Vector {
        self.values.first().expect("path has at least one node")
    }
}

fn check_adjoint_inputs(traj: &TrainingTrajectory) -> Result<(), InfluenceError> {
    if traj.example_weights().is_some() {
        return Err(InfluenceError::WeightedTrajectory);
    }
    let d = traj.model_template().num_weights();
    if d > DENSE_HESSIAN_CAP {
        return Err(InfluenceError::DenseHessianTooLarge { dim: d, cap: DENSE_HESSIAN_CAP });
    }
    Ok(())
}

/// Dense Hessian of the mean training loss at (interpolated) time t,
/// column k = exact Hessian-vector product against the k-th basis vector.
fn dense_hessian(traj: &TrainingTrajectory, t: f64) -> Result<Mat, InfluenceError> {
    let model = traj.model_at(t)?;
    hessian_of(&model, traj)
}

fn hessian_of(model: &Model, traj: &TrainingTrajectory) -> Result<Mat, InfluenceError> {
    let d = model.num_weights();
    let mut h = Mat::zeros((d, d));
    let mut e = Vector::zeros(d);
    for k in 0..d {
        e[k] = 1.0;
        let col = model.loss_hvp(traj.train_data(), traj.loss_kind(), &e)?;
        h.column_mut(k).assign(&col);
        e[k] = 0.0;
    }
    // The exact Hessian is symmetric; column-wise assembly leaves only
    // roundoff asymmetry, which symmetrizing removes.
    Ok((&h + &h.t()) * 0.5)
}

/// Model with the exact snapshot weights of node k (no interpolation).
fn model_at_node(traj: &TrainingTrajectory, k: usize) -> Result<Model, InfluenceError> {
    let mut model = traj.model_template().clone();
    model.set_weights(traj.weights_at_node(k).clone())?;
    Ok(model)
}

/// Integrate ∂_τ P = H(τ) P from the terminal node down to node 0 with RK4
/// on the trajectory grid. Columns evolve independently, so one stacked
/// pass solves every adjoint at once and keeps assembly deterministic.
/// Returns P at every node, index-aligned with `traj.times()`.
fn backward_adjoint_path(
    traj: &TrainingTrajectory,
    terminal: Mat,
) -> Result<Vec<Mat>, InfluenceError> {
    let times = traj.times().to_vec();
    let m = times.len();
    let mut values: Vec<Mat> = vec![Mat::zeros(terminal.dim()); m];
    values[m - 1] = terminal;
    if m == 1 {
        return Ok(values);
    }
    let mut h_right = dense_hessian(traj, times[m - 1])?;
    for k in (1..m).rev() {
        let (a, b) = (times[k - 1], times[k]);
        let step = a - b; // negative: integrating toward τ = 0
        let h_mid = dense_hessian(traj, 0.5 * (a + b))?;
        let h_left = dense_hessian(traj, a)?;
        let p = values[k].clone();
        let half = 0.5 * step;
        let k1 = h_right.dot(&p);
        let k2 = h_mid.dot(&(&p + &(&k1 * half)));
        let k3 = h_mid.dot(&(&p + &(&k2 * half)));
        let k4 = h_left.dot(&(&p + &(&k3 * step)));
        values[k - 1] = &p + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0));
        h_right = h_left;
    }
    Ok(values)
}

/// Terminal adjoint covector for train example i under terminal loss ψ:
/// J_i(w(T))ᵀ ∇ψ(u_i(T), y_i).
fn terminal_covector(
    traj: &TrainingTrajectory,
    terminal_model: &Model,
    i: usize,
    psi: Loss,
) -> Result<Vector, InfluenceError> {
    let data = traj.train_data();
    let u = terminal_model.forward_one(data.input(i))?;
    let grad = psi.gradient(u.view(), data.target(i));
    let jac = terminal_model.jacobian_one(data.input(i))?;
    Ok(jac.t().dot(&grad))
}

/// Backward adjoint path for train example i under terminal loss ψ.
///
/// The returned path p satisfies ∂_τ p = ∇²L_S(w(τ)) p with terminal value
/// J_i(w(T))ᵀ ∇ψ(e_i(T)); pairing it against per-example gradients under
/// the quadrature in [`influence_matrix`] yields row i of J.
pub fn backward_sensitivity(
    traj: &TrainingTrajectory,
    i: usize,
    psi: Loss,
) -> Result<AdjointPath, InfluenceError> {
    check_adjoint_inputs(traj)?;
    let n = traj.train_data().num_examples();
    if i >= n {
        return Err(InfluenceError::ExampleOutOfRange { index: i, n });
    }
    let last = traj.num_nodes() - 1;
    let terminal_model = model_at_node(traj, last)?;
    let p_t = terminal_covector(traj, &terminal_model, i, psi)?;
    let d = p_t.len();
    let terminal = p_t.into_shape_with_order((d, 1)).expect("column reshape");
    let path = backward_adjoint_path(traj, terminal)?;
    Ok(AdjointPath {
        times: traj.times().to_vec(),
        values: path.into_iter().map(|m| m.column(0).to_owned()).collect(),
    })
}

/// Forward sensitivity v of the weight path to downweighting direction ν:
///
///   ∂_τ v = −∇²L_S(w(τ)) v + (1/n) Σ_j ν_j ∇ℓ_j(w(τ)),   v(0) = 0.
///
/// The terminal pairing ⟨∇ψ(U_Q(T)), J_Q(w(T)) v(T)⟩ equals the adjoint
/// route's integral; the two solves are independent computations of the
/// same derivative and are checked against each other in tests.
pub fn forward_sensitivity(
    traj: &TrainingTrajectory,
    nu: &Vector,
) -> Result<AdjointPath, InfluenceError> {
    check_adjoint_inputs(traj)?;
    let n = traj.train_data().num_examples();
    if nu.len() != n {
        return Err(InfluenceError::DatasetMismatch {
            reason: format!("direction has {} entries, dataset has {n} examples", nu.len()),
        });
    }
    let d = traj.model_template().num_weights();
    let times = traj.times().to_vec();
    let m = times.len();
    // H and the source term share the interpolated model; build both at once.
    let rhs_data = |t: f64| -> Result<(Mat, Vector), InfluenceError> {
        let model = traj.model_at(t)?;
        let h = hessian_of(&model, traj)?;
        let grads = model.per_example_gradients(traj.train_data(), traj.loss_kind())?;
        let mut src = Vector::zeros(d);
        for (j, row) in grads.rows().into_iter().enumerate() {
            src.scaled_add(nu[j] / n as f64, &row);
        }
        Ok((h, src))
    };
    let mut values: Vec<Vector> = Vec::with_capacity(m);
    values.push(Vector::zeros(d));
    if m > 1 {
        let mut left = rhs_data(times[0])?;
        for k in 0..m - 1 {
            let (a, b) = (times[k], times[k + 1]);
            let step = b - a;
            let mid = rhs_data(0.5 * (a + b))?;
            let right = rhs_data(b)?;
            let v = values[k].clone();
            let half = 0.5 * step;
            let eval = |d: &(Mat, Vector), v: &Vector| -> Vector { &d.1 - &d.0.dot(v) };
            let k1 = eval(&left, &v);
            let k2 = eval(&mid, &(&v + &(&k1 * half)));
            let k3 = eval(&mid, &(&v + &(&k2 * half)));
            let k4 = eval(&right, &(&v + &(&k3 * step)));
            values.push(&v + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0)));
            left = right;
        }
    }
    Ok(AdjointPath { times, values })
}

/// Influence matrix of a recorded run: one stacked backward solve, then
/// trapezoid quadrature of (1/n)⟨p_i(τ), ∇ℓ_j(w(τ))⟩ on the node grid.
pub fn influence_matrix(
    traj: &TrainingTrajectory,
    psi: Loss,
) -> Result<InfluenceMatrix, InfluenceError> {
    check_adjoint_inputs(traj)?;
    let data = traj.train_data();
    let n = data.num_examples();
    let d = traj.model_template().num_weights();
    let last = traj.num_nodes() - 1;
    let terminal_model = model_at_node(traj, last)?;
    let mut terminal = Mat::zeros((d, n));
    for i in 0..n {
        let p_t = terminal_covector(traj, &terminal_model, i, psi)?;
        terminal.column_mut(i).assign(&p_t);
    }
    let path = backward_adjoint_path(traj, terminal)?;

    let times = traj.times();
    let m = times.len();
    let mut j = Mat::zeros((n, n));
    if m > 1 {
        for k in 0..m {
            let weight = match k {
                0 => 0.5 * (times[1] - times[0]),
                _ if k == m - 1 => 0.5 * (times[m - 1] - times[m - 2]),
                _ => 0.5 * (times[k + 1] - times[k - 1]),
            };
            let model = model_at_node(traj, k)?;
            let grads = model.per_example_gradients(data, traj.loss_kind())?;
            // (grads · P)ᵀ has entry (i, j) = ⟨p_i(t_k), ∇ℓ_j(w(t_k))⟩.
            j = &j + &(grads.dot(&path[k]).t().to_owned() * weight);
        }
    }
    j *= 1.0 / n as f64;
    Ok(InfluenceMatrix { matrix: j, horizon: traj.horizon(), psi })
}
