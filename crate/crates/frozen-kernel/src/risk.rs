//! The unified bias–variance decomposition and its specializations: the
//! predictive-rank risk path, the interpolation (benign-overfitting) trace,
//! ridge-path sweeps, and the grokking transfer mass.

use ndarray::s;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use numerics::{seeded_rng, sqrt_psd, sym_eig, tol, Vector};

use crate::filter::{make_filter, Filter, FilterKind};
use crate::spectral::SpectralModel;
use crate::FrozenKernelError;

/// One evaluation of the unified decomposition.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RiskSplit {
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
}

/// Exact conditional risk of the filtered predictor:
/// bias āᵀ(I−M)Γ₀(I−M)ā plus variance tr(MΓ₀MΣ_ζ).
pub fn bias_variance(sm: &SpectralModel, filter: &Filter) -> RiskSplit {
    let unfit = &sm.a_bar - &filter.apply(&sm.a_bar);
    let bias = unfit.dot(&sm.gamma0.dot(&unfit));

    // M Γ₀ M is symmetric and so is Σ_ζ, so the trace of their product is
    // the elementwise-product sum.
    let m = filter.to_matrix();
    let mgm = m.dot(&sm.gamma0).dot(&m);
    let variance = (&mgm * &sm.noise_cov).sum();

    RiskSplit {
        bias,
        variance,
        risk: bias + variance,
    }
}

/// Monte Carlo estimate of the same risk.
#[derive(Clone, Copy, Debug)]
pub struct McRisk {
    pub mean: f64,
    pub std_error: f64,
    pub draws: usize,
}

/// Samples ‖U_Q^M − Ū_Q‖² over fresh noise draws ζ ~ N(0, Σ_ζ), building the
/// filtered test output from its definition rather than from the
/// decomposition, so the estimate is an independent check of
/// [`bias_variance`].
pub fn monte_carlo_risk(
    sm: &SpectralModel,
    filter: &Filter,
    draws: usize,
    seed: u64,
) -> Result<McRisk, FrozenKernelError> {
    let r = sm.rank();
    let mut rng = seeded_rng(seed);
    let root_cov = sqrt_psd(&sm.noise_cov)?;
    let mean_output = sm.mean_test_output();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let white = Vector::from_shape_fn(r, |_| StandardNormal.sample(&mut rng));
        let zeta = root_cov.dot(&white);
        let noisy_a = &sm.a_bar + &zeta;
        let filtered = &sm.test_output0 + &sm.c0.dot(&filter.apply(&noisy_a));
        let err = &filtered - &mean_output;
        let sq = err.dot(&err);
        sum += sq;
        sum_sq += sq * sq;
    }
    let mean = sum / draws as f64;
    let var = (sum_sq / draws as f64 - mean * mean).max(0.0) * draws as f64
        / (draws as f64 - 1.0);
    Ok(McRisk {
        mean,
        std_error: (var / draws as f64).sqrt(),
        draws,
    })
}

/// One row of the predictive-rank risk path.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RankRisk {
    pub modes: usize,
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
    /// Risk change from keeping one more mode; empty on the last row.
    pub increment: Option<f64>,
}

/// Risk along rank truncations M = P_r for r = 0..=rank(Γ₀).
///
/// Diagonalizing Γ₀ = Σ_j λ_j ψ_jψ_jᵀ, the row at r carries
/// bias Σ_{j>r} λ_j⟨ψ_j,ā⟩² and variance Σ_{j≤r} λ_j⟨ψ_j,Σ_ζψ_j⟩, and the
/// increment λ_{r+1}(⟨ψ_{r+1},Σ_ζψ_{r+1}⟩ − ⟨ψ_{r+1},ā⟩²) whose sign says
/// whether mode r+1 carries more noise than signal. Ties in the spectrum
/// keep the eigensolver's return order (the sort is stable), which fixes a
/// deterministic path even though the projector family is not unique at a
/// tie.
pub fn predictive_rank_path(sm: &SpectralModel) -> Result<Vec<RankRisk>, FrozenKernelError> {
    let eig = sym_eig(&sm.gamma0)?;
    let rho = eig.rank(tol::RANK_TOL);
    let lambda = eig.eigenvalues.slice(s![..rho]).to_owned();
    let psi = eig.eigenvectors.slice(s![.., ..rho]).to_owned();

    let signal = psi.t().dot(&sm.a_bar).mapv(|x| x * x);
    let noise = {
        let sp = sm.noise_cov.dot(&psi);
        Vector::from_iter(
            psi.columns()
                .into_iter()
                .zip(sp.columns())
                .map(|(p, q)| p.dot(&q)),
        )
    };

    let mut rows = Vec::with_capacity(rho + 1);
    for r in 0..=rho {
        let bias: f64 = (r..rho).map(|j| lambda[j] * signal[j]).sum();
        let variance: f64 = (0..r).map(|j| lambda[j] * noise[j]).sum();
        let increment = (r < rho).then(|| lambda[r] * (noise[r] - signal[r]));
        rows.push(RankRisk {
            modes: r,
            bias,
            variance,
            risk: bias + variance,
            increment,
        });
    }
    Ok(rows)
}

/// Test transfer mass on the mobile singular space at gradient-flow time t:
/// the spectrum of n²·M_tΓ₀M_t, split into its leading eigenvalue and the
/// rest.
#[derive(Clone, Debug)]
pub struct TransferMass {
    pub time: f64,
    /// Eigenvalues of n²·M_tΓ₀M_t, descending.
    pub spectrum: Vector,
    pub leading_mass: f64,
    pub tail_mass: f64,
}

pub fn grokking_transfer_mass(
    sm: &SpectralModel,
    time: f64,
) -> Result<TransferMass, FrozenKernelError> {
    let filter = make_filter(FilterKind::GradientFlow { time }, sm)?;
    let d = filter.diagonal().expect("gradient-flow filter is diagonal");
    let n = sm.num_train() as f64;
    let mut mass = sm.gamma0.clone();
    for ((i, j), x) in mass.indexed_iter_mut() {
        *x *= n * n * d[i] * d[j];
    }
    let spectrum = sym_eig(&mass)?.eigenvalues;
    let leading = spectrum.first().copied().unwrap_or(0.0);
    let total: f64 = spectrum.sum();
    Ok(TransferMass {
        time,
        spectrum,
        leading_mass: leading,
        tail_mass: total - leading,
    })
}

/// Ridge-path sweep row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RidgePathRow {
    pub lambda: f64,
    pub bias: f64,
    pub variance: f64,
    pub risk: f64,
}

/// Evaluates the decomposition along a weight-decay grid. λ = 0 is the
/// saturated gradient-flow endpoint (full interpolation), so it maps to the
/// identity filter rather than to a degenerate ridge parameter.
pub fn ridge_path_table(
    sm: &SpectralModel,
    lambdas: &[f64],
) -> Result<Vec<RidgePathRow>, FrozenKernelError> {
    lambdas
        .iter()
        .map(|&lambda| {
            let kind = if lambda == 0.0 {
                FilterKind::Identity
            } else {
                FilterKind::Ridge { shrinkage: lambda }
            };
            let split = bias_variance(sm, &make_filter(kind, sm)?);
            Ok(RidgePathRow {
                lambda,
                bias: split.bias,
                variance: split.variance,
                risk: split.risk,
            })
        })
        .collect()
}

/// Grokking-mass sweep row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GrokkingMassRow {
    pub time: f64,
    pub leading_mass: f64,
    pub tail_mass: f64,
}

pub fn grokking_mass_table(
    sm: &SpectralModel,
    times: &[f64],
) -> Result<Vec<GrokkingMassRow>, FrozenKernelError> {
    times
        .iter()
        .map(|&time| {
            let mass = grokking_transfer_mass(sm, time)?;
            Ok(GrokkingMassRow {
                time,
                leading_mass: mass.leading_mass,
                tail_mass: mass.tail_mass,
            })
        })
        .collect()
}
