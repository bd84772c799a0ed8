//! Batch gradient statistics, the off-diagonal rate Ω_B, and its exact
//! maximizer over preconditioners dominated by a PSD base.
//!
//! Everything here is per-batch: given per-example gradients g_1..g_b, the
//! rate matrix A_B = ḡ_Bḡ_Bᵀ − Σ_B/(b−1) prices each direction by how much
//! of the mean gradient survives a leave-one-out average. Σ_B is the biased
//! (1/b-normalized) batch covariance; with that normalization and only that
//! one, tr(M A_B) equals the pairwise form (1/(b(b−1)))Σ_{a≠c} g_aᵀM g_c.

use ndarray::Axis;
use numerics::{sqrt_psd, sym_eig, tol, Mat, Vector};

use crate::PopRiskError;

/// Largest parameter dimension for which the dense covariance Σ_B and rate
/// matrix A_B are materialized. The theory checks (full projector, trace
/// identities) need the dense objects only at desk scale; past this cap the
/// diagonal statistics still come out and the O(d) gate path is unaffected.
pub const DENSE_THRESHOLD: usize = 64;

/// Per-batch gradient statistics.
///
/// Built by [`batch_stats`]. The centered rows satisfy Σ_a c_a = 0 by
/// construction, and `diag_variance` is the diagonal of Σ_B = (1/b)Σ c_ac_aᵀ
/// whether or not the dense matrix was materialized.
#[derive(Clone, Debug)]
pub struct BatchStats {
    grads: Mat,
    mean: Vector,
    centered: Mat,
    diag_variance: Vector,
    dense_covariance: Option<Mat>,
    dense_rate: Option<Mat>,
}

impl BatchStats {
    /// Number of per-example gradients in the batch.
    pub fn batch_size(&self) -> usize {
        self.grads.nrows()
    }

    /// Parameter dimension d.
    pub fn dim(&self) -> usize {
        self.grads.ncols()
    }

    /// The raw per-example gradients, one row per example.
    pub fn grads(&self) -> &Mat {
        &self.grads
    }

    /// Batch mean gradient ḡ_B.
    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    /// Centered gradients c_a = g_a − ḡ_B, one row per example.
    pub fn centered(&self) -> &Mat {
        &self.centered
    }

    /// Diagonal of the batch covariance, σ_k² = (Σ_B)_{kk} = (1/b)Σ_a c_{a,k}².
    pub fn diag_variance(&self) -> &Vector {
        &self.diag_variance
    }

    /// Dense Σ_B = (1/b)Σ_a c_ac_aᵀ when d ≤ [`DENSE_THRESHOLD`].
    pub fn dense_covariance(&self) -> Option<&Mat> {
        self.dense_covariance.as_ref()
    }

    /// Dense rate matrix A_B = ḡ_Bḡ_Bᵀ − Σ_B/(b−1) when d ≤ [`DENSE_THRESHOLD`].
    pub fn dense_rate(&self) -> Option<&Mat> {
        self.dense_rate.as_ref()
    }
}

/// Assemble [`BatchStats`] from per-example gradients (one row per example).
///
/// Needs b ≥ 2: with a single gradient there is no spread to price and the
/// leave-one-out divisor b−1 vanishes.
pub fn batch_stats(grads: &Mat) -> Result<BatchStats, PopRiskError> {
    let b = grads.nrows();
    if b < 2 {
        return Err(PopRiskError::BatchTooSmall { got: b });
    }
    if grads.iter().any(|x| !x.is_finite()) {
        return Err(PopRiskError::NonFiniteGradient);
    }
    let mean = grads.mean_axis(Axis(0)).expect("b >= 2");
    let centered = grads - &mean.view().insert_axis(Axis(0));
    let diag_variance = centered.map(|c| c * c).mean_axis(Axis(0)).expect("b >= 2");
    debug_assert!(
        centered.sum_axis(Axis(0)).iter().all(|s| s.abs() <= 1e-10),
        "centered gradients must sum to zero"
    );

    let d = grads.ncols();
    let (dense_covariance, dense_rate) = if d <= DENSE_THRESHOLD {
        let sigma = centered.t().dot(&centered) / b as f64;
        let mean_col = mean.view().insert_axis(Axis(1));
        let rate = mean_col.dot(&mean_col.t()) - &sigma / (b as f64 - 1.0);
        (Some(sigma), Some(rate))
    } else {
        (None, None)
    };

    Ok(BatchStats {
        grads: grads.clone(),
        mean,
        centered,
        diag_variance,
        dense_covariance,
        dense_rate,
    })
}

/// A PSD preconditioner 0 ⪯ M, either a full matrix or a diagonal.
#[derive(Clone, Debug)]
pub enum Preconditioner {
    /// M = diag(q) with q ≥ 0 elementwise.
    Diagonal(Vector),
    /// A dense symmetric PSD matrix.
    Dense(Mat),
}

impl Preconditioner {
    /// Side length of the matrix this represents.
    pub fn dim(&self) -> usize {
        match self {
            Preconditioner::Diagonal(q) => q.len(),
            Preconditioner::Dense(m) => m.nrows(),
        }
    }

    /// M·x.
    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            Preconditioner::Diagonal(q) => q * x,
            Preconditioner::Dense(m) => m.dot(x),
        }
    }

    /// xᵀMx.
    fn quadratic(&self, x: &Vector) -> f64 {
        x.dot(&self.apply(x))
    }

    /// Reject asymmetric or indefinite preconditioners. The eigencheck runs
    /// at the shared symmetry tolerance: an eigenvalue below
    /// −tol·(1 + λ_max) counts as indefinite, so PSD matrices that picked up
    /// roundoff-scale negative curvature still pass.
    fn check_psd(&self) -> Result<(), PopRiskError> {
        match self {
            Preconditioner::Diagonal(q) => {
                let scale = q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let min = q.iter().fold(f64::INFINITY, |m, &x| m.min(x));
                if min < -tol::SYM_ASYM_TOL * (1.0 + scale) {
                    return Err(PopRiskError::IndefinitePreconditioner {
                        min_eigenvalue: min,
                    });
                }
            }
            Preconditioner::Dense(m) => {
                let mut defect = 0.0f64;
                let mut scale = 0.0f64;
                for ((i, j), &x) in m.indexed_iter() {
                    defect = defect.max((x - m[[j, i]]).abs());
                    scale = scale.max(x.abs());
                }
                if defect > tol::SYM_ASYM_TOL * (1.0 + scale) {
                    return Err(PopRiskError::AsymmetricPreconditioner { defect });
                }
                let eig = sym_eig(&((m + &m.t()) * 0.5))?;
                let top = eig.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
                let min = eig
                    .eigenvalues
                    .iter()
                    .fold(f64::INFINITY, |a, &x| a.min(x));
                if min < -tol::SYM_ASYM_TOL * (1.0 + top) {
                    return Err(PopRiskError::IndefinitePreconditioner {
                        min_eigenvalue: min,
                    });
                }
            }
        }
        Ok(())
    }
}

/// The off-diagonal rate Ω_B(M) = tr(M A_B).
///
/// Evaluated through the covariance form ḡᵀMḡ − (1/(b(b−1)))Σ_a c_aᵀMc_a,
/// which needs no dense A_B and so works at any dimension with either
/// preconditioner shape. Rejects M that fails the PSD eigencheck.
pub fn omega_rate(stats: &BatchStats, m: &Preconditioner) -> Result<f64, PopRiskError> {
    if m.dim() != stats.dim() {
        return Err(PopRiskError::DimensionMismatch {
            expected: stats.dim(),
            got: m.dim(),
        });
    }
    m.check_psd()?;
    let b = stats.batch_size() as f64;
    let mut spread = 0.0;
    for c in stats.centered.rows() {
        spread += m.quadratic(&c.to_owned());
    }
    Ok(m.quadratic(&stats.mean) - spread / (b * (b - 1.0)))
}

/// Ω_B(M) evaluated in output space through the kernel blocks
/// K_ac^M = J_a M J_cᵀ, as (1/(b(b−1)))Σ_{a≠c} r_aᵀ K_ac^M r_c.
///
/// `jacobians[a]` is the per-example Jacobian (output_dim × d) and
/// `residuals[a]` the output-space loss gradient ∇φ(u_a), so that
/// g_a = J_aᵀ r_a. This is the independent route to the same number as
/// [`omega_rate`]: it never forms parameter-space gradients, only p×p
/// blocks.
pub fn omega_rate_kernel_blocks(
    jacobians: &[Mat],
    residuals: &[Vector],
    m: &Preconditioner,
) -> Result<f64, PopRiskError> {
    let b = jacobians.len();
    if b < 2 {
        return Err(PopRiskError::BatchTooSmall { got: b });
    }
    if residuals.len() != b {
        return Err(PopRiskError::DimensionMismatch {
            expected: b,
            got: residuals.len(),
        });
    }
    let d = jacobians[0].ncols();
    for (j, r) in jacobians.iter().zip(residuals) {
        if j.ncols() != d {
            return Err(PopRiskError::DimensionMismatch {
                expected: d,
                got: j.ncols(),
            });
        }
        if j.nrows() != r.len() {
            return Err(PopRiskError::DimensionMismatch {
                expected: j.nrows(),
                got: r.len(),
            });
        }
    }
    if m.dim() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: m.dim(),
        });
    }
    m.check_psd()?;

    // M J_cᵀ for each c, formed once; the a-loop then builds each p×p block.
    let lifted: Vec<Mat> = jacobians
        .iter()
        .map(|j| match m {
            Preconditioner::Diagonal(q) => {
                let mut jt = j.t().to_owned();
                for (mut row, &qk) in jt.rows_mut().into_iter().zip(q.iter()) {
                    row *= qk;
                }
                jt
            }
            Preconditioner::Dense(mm) => mm.dot(&j.t()),
        })
        .collect();

    let mut total = 0.0;
    for a in 0..b {
        for c in 0..b {
            if a == c {
                continue;
            }
            let block = jacobians[a].dot(&lifted[c]);
            total += residuals[a].dot(&block.dot(&residuals[c]));
        }
    }
    let bf = b as f64;
    Ok(total / (bf * (bf - 1.0)))
}

/// The exact maximizer of tr(M A) over 0 ⪯ M ⪯ P for a symmetric rate
/// matrix A and PSD base P:
///
/// M* = P^{1/2} 1_{(0,∞)}(P^{1/2} A P^{1/2}) P^{1/2}.
///
/// The indicator keeps eigenvalues above the relative rank cut, so a rate
/// matrix that is PSD up to roundoff maps to the projector onto its range
/// and a non-positive one maps to zero.
pub fn rate_projector(rate: &Mat, base: &Mat) -> Result<Mat, PopRiskError> {
    let d = rate.nrows();
    if base.nrows() != d || base.ncols() != d || rate.ncols() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: base.nrows(),
        });
    }
    Preconditioner::Dense(base.clone()).check_psd()?;
    let half = sqrt_psd(base)?;
    let core = half.dot(rate).dot(&half);
    let core = (&core + &core.t()) * 0.5;
    let eig = sym_eig(&core)?;
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let cut = tol::RANK_TOL * scale;
    let indicator = eig.apply_fn(|l| if l > cut { 1.0 } else { 0.0 });
    let m = half.dot(&indicator).dot(&half);
    Ok((&m + &m.t()) * 0.5)
}

/// [`rate_projector`] driven by a batch: maximizes tr(M A_B) over
/// 0 ⪯ M ⪯ P. Needs the dense rate matrix, so d must be at most
/// [`DENSE_THRESHOLD`].
pub fn optimal_projector(stats: &BatchStats, base: &Mat) -> Result<Mat, PopRiskError> {
    let rate = stats
        .dense_rate()
        .ok_or(PopRiskError::DensePathUnavailable {
            dim: stats.dim(),
            cap: DENSE_THRESHOLD,
        })?;
    rate_projector(rate, base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use models::{make_dataset, GeneratorSpec, Loss, Model};
    use numerics::{eye, seeded_rng, svd};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_grads(b: usize, d: usize, seed: u64) -> Mat {
        let mut rng = seeded_rng(seed);
        Mat::from_shape_fn((b, d), |_| StandardNormal.sample(&mut rng))
    }

    /// Brute-force pairwise sum (1/(b(b−1))) Σ_{a≠c} g_aᵀ M g_c.
    fn pairwise_oracle(grads: &Mat, m: &Preconditioner) -> f64 {
        let b = grads.nrows();
        let mut total = 0.0;
        for a in 0..b {
            for c in 0..b {
                if a != c {
                    total += grads.row(a).dot(&m.apply(&grads.row(c).to_owned()));
                }
            }
        }
        total / (b * (b - 1)) as f64
    }

    #[test]
    fn identical_gradients_have_zero_spread_and_rank_one_rate() {
        let g = Vector::from(vec![1.0, -2.0, 0.5]);
        let grads = Mat::from_shape_fn((4, 3), |(_, j)| g[j]);
        let stats = batch_stats(&grads).unwrap();
        assert!(stats.diag_variance().iter().all(|&v| v == 0.0));
        let rate = stats.dense_rate().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(rate[[i, j]], g[i] * g[j], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn antipodal_pair_has_negative_identity_rate() {
        let g1 = Vector::from(vec![0.3, -1.2, 2.0, 0.7]);
        let mut grads = Mat::zeros((2, 4));
        grads.row_mut(0).assign(&g1);
        grads.row_mut(1).assign(&(-&g1));
        let stats = batch_stats(&grads).unwrap();
        assert!(stats.mean().iter().all(|&x| x == 0.0));
        let m = Preconditioner::Diagonal(Vector::ones(4));
        let omega = omega_rate(&stats, &m).unwrap();
        assert_abs_diff_eq!(omega, -g1.dot(&g1), epsilon = 1e-12);
        assert_abs_diff_eq!(omega, pairwise_oracle(&grads, &m), epsilon = 1e-12);
    }

    #[test]
    fn rate_trace_matches_the_pairwise_sum() {
        let grads = random_grads(5, 8, 11);
        let stats = batch_stats(&grads).unwrap();
        let rate = stats.dense_rate().unwrap();
        let trace: f64 = (0..8).map(|k| rate[[k, k]]).sum();
        let m = Preconditioner::Diagonal(Vector::ones(8));
        assert_abs_diff_eq!(trace, pairwise_oracle(&grads, &m), epsilon = 1e-10);
    }

    #[test]
    fn zero_preconditioner_gives_zero_rate() {
        let grads = random_grads(4, 6, 3);
        let stats = batch_stats(&grads).unwrap();
        let zero_diag = Preconditioner::Diagonal(Vector::zeros(6));
        let zero_dense = Preconditioner::Dense(Mat::zeros((6, 6)));
        assert_eq!(omega_rate(&stats, &zero_diag).unwrap(), 0.0);
        assert_eq!(omega_rate(&stats, &zero_dense).unwrap(), 0.0);
    }

    #[test]
    fn identity_rate_matches_explicit_enumeration_at_b_three() {
        let mut grads = Mat::zeros((3, 2));
        grads.row_mut(0).assign(&Vector::from(vec![1.0, 0.0]));
        grads.row_mut(1).assign(&Vector::from(vec![0.0, 2.0]));
        grads.row_mut(2).assign(&Vector::from(vec![-1.0, 1.0]));
        let stats = batch_stats(&grads).unwrap();
        let m = Preconditioner::Dense(eye(2));
        // Pairs: ⟨g1,g2⟩=0, ⟨g1,g3⟩=−1, ⟨g2,g3⟩=2, each twice, over b(b−1)=6.
        let expected = 2.0 * (0.0 - 1.0 + 2.0) / 6.0;
        assert_abs_diff_eq!(omega_rate(&stats, &m).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn kernel_block_route_agrees_with_the_gradient_route() {
        let model = Model::mlp(&[3, 5, 2], models::Activation::Tanh, 21).unwrap();
        let data = make_dataset(
            &GeneratorSpec::LinearGaussian {
                num_examples: 4,
                input_dim: 3,
                output_dim: 2,
            },
            22,
        )
        .unwrap();
        let grads = model.per_example_gradients(&data, Loss::Squared).unwrap();
        let stats = batch_stats(&grads).unwrap();

        let mut jacobians = Vec::new();
        let mut residuals = Vec::new();
        for i in 0..data.num_examples() {
            jacobians.push(model.jacobian_one(data.input(i)).unwrap());
            let u = model.forward_one(data.input(i)).unwrap();
            residuals.push(Loss::Squared.gradient(u.view(), data.target(i)));
        }

        let d = model.num_weights();
        let mut rng = seeded_rng(23);
        let root = Mat::from_shape_fn((d, d), |_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x / (d as f64).sqrt()
        });
        let dense = Preconditioner::Dense(root.t().dot(&root));
        let diag =
            Preconditioner::Diagonal(Vector::from_shape_fn(d, |_| rng.random_range(0.0..2.0)));

        for m in [dense, diag] {
            let via_grads = omega_rate(&stats, &m).unwrap();
            let via_blocks = omega_rate_kernel_blocks(&jacobians, &residuals, &m).unwrap();
            assert_abs_diff_eq!(via_grads, via_blocks, epsilon = 1e-10);
        }
    }

    #[test]
    fn indefinite_and_asymmetric_preconditioners_are_rejected() {
        let grads = random_grads(3, 2, 7);
        let stats = batch_stats(&grads).unwrap();

        let indefinite = Preconditioner::Dense(Mat::from_shape_vec(
            (2, 2),
            vec![1.0, 0.0, 0.0, -1.0],
        )
        .unwrap());
        assert!(matches!(
            omega_rate(&stats, &indefinite),
            Err(PopRiskError::IndefinitePreconditioner { .. })
        ));

        let asymmetric = Preconditioner::Dense(Mat::from_shape_vec(
            (2, 2),
            vec![1.0, 0.5, -0.5, 1.0],
        )
        .unwrap());
        assert!(matches!(
            omega_rate(&stats, &asymmetric),
            Err(PopRiskError::AsymmetricPreconditioner { .. })
        ));

        let negative_diag = Preconditioner::Diagonal(Vector::from(vec![1.0, -0.2]));
        assert!(matches!(
            omega_rate(&stats, &negative_diag),
            Err(PopRiskError::IndefinitePreconditioner { .. })
        ));
    }

    #[test]
    fn psd_rate_with_identity_base_projects_onto_its_range() {
        // Identical gradients make Σ_B = 0, so A_B = ḡḡᵀ is PSD of rank one
        // and the maximizer is the unit projector onto span(ḡ) with value
        // tr(A_B).
        let g = Vector::from(vec![2.0, 0.0, -1.0]);
        let grads = Mat::from_shape_fn((3, 3), |(_, j)| g[j]);
        let stats = batch_stats(&grads).unwrap();
        let m_star = optimal_projector(&stats, &eye(3)).unwrap();
        let norm2 = g.dot(&g);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(m_star[[i, j]], g[i] * g[j] / norm2, epsilon = 1e-10);
            }
        }
        let value = omega_rate(&stats, &Preconditioner::Dense(m_star)).unwrap();
        let trace: f64 = (0..3).map(|k| stats.dense_rate().unwrap()[[k, k]]).sum();
        assert_abs_diff_eq!(value, trace, epsilon = 1e-10);
    }

    #[test]
    fn non_positive_rate_yields_the_zero_projector() {
        // A zero-mean batch has A_B = −Σ_B/(b−1) ⪯ 0.
        let g1 = Vector::from(vec![1.0, 2.0, -0.5, 0.3]);
        let mut grads = Mat::zeros((2, 4));
        grads.row_mut(0).assign(&g1);
        grads.row_mut(1).assign(&(-&g1));
        let stats = batch_stats(&grads).unwrap();
        let m_star = optimal_projector(&stats, &eye(4)).unwrap();
        assert!(m_star.iter().all(|&x| x.abs() <= 1e-12));
    }

    #[test]
    fn projector_beats_random_feasible_preconditioners() {
        let grads = random_grads(5, 6, 41);
        let stats = batch_stats(&grads).unwrap();
        let mut rng = seeded_rng(42);

        // Random PSD base P = RᵀR + I/2.
        let r = Mat::from_shape_fn((6, 6), |_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * 0.4
        });
        let base = r.t().dot(&r) + &(eye(6) * 0.5);

        let m_star = optimal_projector(&stats, &base).unwrap();
        let best = omega_rate(&stats, &Preconditioner::Dense(m_star)).unwrap();

        let half = sqrt_psd(&base).unwrap();
        for _ in 0..200 {
            // Feasible M = P^{1/2} QΛQᵀ P^{1/2} with Λ ∈ [0,1] and Q the
            // orthonormal factor of a Gaussian matrix: 0 ⪯ M ⪯ P.
            let gauss = Mat::from_shape_fn((6, 6), |_| StandardNormal.sample(&mut rng));
            let q = svd(&gauss).u;
            let lambda = Vector::from_shape_fn(6, |_| rng.random_range(0.0..1.0));
            let mut contraction = Mat::zeros((6, 6));
            for k in 0..6 {
                let col = q.column(k).to_owned();
                let outer =
                    col.view().insert_axis(Axis(1)).dot(&col.view().insert_axis(Axis(0)));
                contraction = contraction + &outer * lambda[k];
            }
            let m = half.dot(&contraction).dot(&half);
            let m = (&m + &m.t()) * 0.5;
            let value = omega_rate(&stats, &Preconditioner::Dense(m)).unwrap();
            assert!(
                value <= best + 1e-10,
                "random feasible M beat the projector: {value} > {best}"
            );
        }
    }

    #[test]
    fn dense_path_refuses_large_dimensions() {
        let grads = random_grads(3, DENSE_THRESHOLD + 1, 5);
        let stats = batch_stats(&grads).unwrap();
        assert!(stats.dense_rate().is_none());
        assert!(stats.dense_covariance().is_none());
        // Diagonal statistics still come out.
        assert_eq!(stats.diag_variance().len(), DENSE_THRESHOLD + 1);
        assert!(matches!(
            optimal_projector(&stats, &eye(DENSE_THRESHOLD + 1)),
            Err(PopRiskError::DensePathUnavailable { .. })
        ));
    }

    #[test]
    fn single_gradient_batches_are_rejected() {
        let grads = random_grads(1, 4, 9);
        assert!(matches!(
            batch_stats(&grads),
            Err(PopRiskError::BatchTooSmall { got: 1 })
        ));
    }
}
