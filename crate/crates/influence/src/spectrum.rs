//! Optimal signal directions under a complexity metric.
//!
//! Within the span of what training moved, a metric R ≻ 0 on train-output
//! space grades directions by complexity. Whitening the dissipation
//! Gramian, C_R = R^{−1/2} W R^{−1/2}, orders directions by loss dissipated
//! per unit of complexity, and its top-r eigenprojector is the rank-r
//! readout that minimizes worst-case lost test motion: every competing
//! rank-r projector Q obeys λ_max((I−Q) C_R (I−Q)) ≥ λ_{r+1}, while the
//! spectral choice attains it. Test identity enters only through the scalar
//! ‖Γ_Q‖_op, giving the tail curve r ↦ ‖Γ_Q‖_op·λ_{r+1} and the guarantee
//!
//!   ‖G(I − Π_r)h‖² ≤ ‖Γ_Q‖_op λ_{r+1} · hᵀR(I − Π_r)h   for every h,
//!
//! where Π_r = R^{−1/2} Q_r R^{1/2} is the R-orthogonal projector.
//!
//! Ships two metric builders: a k-NN graph Laplacian on the training inputs
//! (smoothness as complexity) and a centered readout quadratic (per-example
//! deviation of terminal-loss sensitivities as complexity).

use models::Dataset;
use numerics::{eye, op_norm, sym_eig, Mat, Vector};
use pathwise_operators::WindowOperators;

use crate::InfluenceError;

/// Neighbors per vertex in the graph-Laplacian metric.
pub const GRAPH_NEIGHBORS: usize = 5;

/// Ridge added to the metric before inversion; keeps R^{−1/2} finite for
/// PSD-but-singular metrics without visibly moving any genuine eigenvalue.
pub const METRIC_RIDGE: f64 = 1e-10;

/// Spectrum of C_R = R^{−1/2} W R^{−1/2} with the lost-motion tail curve.
#[derive(Clone, Debug)]
pub struct SignalSpectrum {
    /// Eigenvalues λ_j of C_R, descending.
    pub eigenvalues: Vector,
    /// Matching eigenvectors φ_j (columns), orthonormal in whitened space.
    pub basis: Mat,
    /// ‖Γ_Q‖_op: how strongly the test set can react per unit dissipation.
    pub visibility_norm: f64,
    /// Numerical rank ρ of C_R at the window's band tolerance.
    pub rank: usize,
    /// tail[r] = ‖Γ_Q‖_op · λ_{r+1}, the optimal worst-case lost test
    /// motion at readout rank r; zero for r ≥ ρ. Indexed r = 0..=np.
    pub tail_values: Vec<f64>,
    /// R^{1/2} of the (regularized) metric.
    pub metric_half: Mat,
    /// R^{−1/2} of the (regularized) metric.
    pub metric_half_inv: Mat,
}

impl SignalSpectrum {
    /// Top-r spectral projector Q_r of C_R (whitened coordinates).
    pub fn projector_whitened(&self, r: usize) -> Mat {
        let np = self.basis.nrows();
        let r = r.min(np);
        let mut q = Mat::zeros((np, np));
        for j in 0..r {
            let v = self.basis.column(j);
            let vc = v.insert_axis(ndarray::Axis(1));
            q = &q + &vc.dot(&vc.t());
        }
        q
    }

    /// R-orthogonal projector Π_r = R^{−1/2} Q_r R^{1/2} acting on raw
    /// train-output coordinates.
    pub fn projector_oblique(&self, r: usize) -> Mat {
        self.metric_half_inv.dot(&self.projector_whitened(r)).dot(&self.metric_half)
    }

    /// Optimal lost-motion value at rank r (see `tail_values`).
    pub fn tail_value(&self, r: usize) -> f64 {
        self.tail_values[r.min(self.tail_values.len() - 1)]
    }
}

/// Eigendecompose the whitened dissipation Gramian under metric R and
/// report the optimal-readout tail curve.
pub fn signal_spectrum(
    ops: &WindowOperators,
    r_metric: &Mat,
) -> Result<SignalSpectrum, InfluenceError> {
    let np = ops.w.nrows();
    if r_metric.nrows() != np || r_metric.ncols() != np {
        return Err(InfluenceError::MetricShape {
            expected: np,
            rows: r_metric.nrows(),
            cols: r_metric.ncols(),
        });
    }
    let reg = (r_metric + &r_metric.t()) * 0.5 + eye(np) * METRIC_RIDGE;
    let eig_r = sym_eig(&reg)?;
    let min_eig = eig_r.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig <= 0.0 {
        return Err(InfluenceError::NonPsdMetric { min_eigenvalue: min_eig - METRIC_RIDGE });
    }
    let metric_half = eig_r.apply_fn(f64::sqrt);
    let metric_half_inv = eig_r.apply_fn(|x| 1.0 / x.sqrt());

    let c = metric_half_inv.dot(&ops.w).dot(&metric_half_inv);
    let c = (&c + &c.t()) * 0.5;
    let eig_c = sym_eig(&c)?;
    let rank = eig_c.rank(ops.rank_tol);
    let visibility_norm = op_norm(&ops.gamma_q);
    let mut tail_values = Vec::with_capacity(np + 1);
    for r in 0..=np {
        if r < rank {
            tail_values.push(visibility_norm * eig_c.eigenvalues[r].max(0.0));
        } else {
            tail_values.push(0.0);
        }
    }
    Ok(SignalSpectrum {
        eigenvalues: eig_c.eigenvalues,
        basis: eig_c.eigenvectors,
        visibility_norm,
        rank,
        tail_values,
        metric_half,
        metric_half_inv,
    })
}

/// Graph-Laplacian complexity metric R = I + γ·(L̂ ⊗ I_p) on stacked
/// train outputs, built from the training inputs: symmetric k-NN graph
/// (k = 5 or n−1 if smaller), Gaussian edge weights exp(−d²/(2σ²)) with σ
/// the median pairwise distance, unnormalized Laplacian L̂ = deg − adj.
/// Smooth-on-the-data-graph directions are cheap; oscillatory ones are
/// expensive.
pub fn graph_laplacian_metric(data: &Dataset, gamma: f64) -> Mat {
    let n = data.num_examples();
    let p = data.output_dim();
    let np = n * p;
    if n < 2 {
        return eye(np);
    }
    let mut dist = Mat::zeros((n, n));
    let mut all: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = data
                .input(i)
                .iter()
                .zip(data.input(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d2.sqrt();
            dist[(i, j)] = d;
            dist[(j, i)] = d;
            all.push(d);
        }
    }
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let median = all[all.len() / 2];
    // Degenerate clouds (most points coincident) would zero the bandwidth;
    // unit fallback keeps the weights defined.
    let sigma = if median > 0.0 { median } else { 1.0 };

    let k = GRAPH_NEIGHBORS.min(n - 1);
    let mut adj = Mat::zeros((n, n));
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist[(i, a)].partial_cmp(&dist[(i, b)]).expect("finite").then(a.cmp(&b))
        });
        for &j in order.iter().take(k) {
            let w = (-dist[(i, j)] * dist[(i, j)] / (2.0 * sigma * sigma)).exp();
            adj[(i, j)] = w;
            adj[(j, i)] = w;
        }
    }
    let mut r = eye(np);
    for i in 0..n {
        let degree: f64 = adj.row(i).sum();
        for c in 0..p {
            r[(i * p + c, i * p + c)] += gamma * degree;
        }
        for j in 0..n {
            if adj[(i, j)] > 0.0 {
                for c in 0..p {
                    r[(i * p + c, j * p + c)] -= gamma * adj[(i, j)];
                }
            }
        }
    }
    r
}

/// Centered readout quadratic β·(A_a D)ᵀ C_n (A_a D) as an additive metric
/// augmentation: A_a contracts the i-th p-block against the readout row
/// a_i, D is the train displacement operator, and C_n centers across
/// examples. Directions whose per-example readout deviates from the batch
/// mean are graded as complex; uniform readout shifts are free.
pub fn centered_readout_metric(
    d_op: &Mat,
    readout: &Mat,
    beta: f64,
) -> Result<Mat, InfluenceError> {
    let n = readout.nrows();
    let p = readout.ncols();
    let np = n * p;
    if d_op.nrows() != np || d_op.ncols() != np {
        return Err(InfluenceError::MetricShape {
            expected: np,
            rows: d_op.nrows(),
            cols: d_op.ncols(),
        });
    }
    let mut a = Mat::zeros((n, np));
    for i in 0..n {
        for c in 0..p {
            a[(i, i * p + c)] = readout[(i, c)];
        }
    }
    let m = a.dot(d_op);
    let centered = {
        let col_mean = m.mean_axis(ndarray::Axis(0)).expect("n ≥ 1 rows");
        &m - &col_mean.insert_axis(ndarray::Axis(0))
    };
    let quad = centered.t().dot(&centered) * beta;
    Ok((&quad + &quad.t()) * 0.5)
}
