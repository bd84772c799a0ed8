//! The spectral model at a fixed base point: thin SVD of the train Jacobian
//! and the handful of derived objects every downstream formula consumes.

use models::{Dataset, Model};
use numerics::{fro_norm, svd, tol, Mat, Vector};

use crate::FrozenKernelError;

/// Covariance of the label noise ξ on the stacked train outputs.
///
/// The isotropic case is the default throughout: it is the one the
/// interpolation-variance trace formula specializes to. An arbitrary PSD
/// covariance over the stacked outputs is accepted as a dense matrix.
#[derive(Clone, Debug)]
pub enum NoiseCovariance {
    /// Cov(ξ) = variance · I on the stacked train outputs.
    Isotropic { variance: f64 },
    /// Full (n·p)×(n·p) PSD covariance of the stacked noise vector.
    Dense(Mat),
}

impl NoiseCovariance {
    /// Covariance of ζ = Uᵀξ in the mobile singular coordinates. U has
    /// orthonormal columns, so the isotropic case stays isotropic.
    fn project(&self, u: &Mat) -> Result<Mat, FrozenKernelError> {
        let (np, r) = (u.nrows(), u.ncols());
        match self {
            NoiseCovariance::Isotropic { variance } => {
                if !variance.is_finite() || *variance < 0.0 {
                    return Err(FrozenKernelError::BadNoiseVariance(*variance));
                }
                Ok(Mat::eye(r) * *variance)
            }
            NoiseCovariance::Dense(c) => {
                if c.nrows() != np || c.ncols() != np {
                    return Err(FrozenKernelError::NoiseCovarianceShape {
                        expected: np,
                        rows: c.nrows(),
                        cols: c.ncols(),
                    });
                }
                let proj = u.t().dot(c).dot(u);
                // Symmetrize to absorb the roundoff of the two-sided product.
                Ok(0.5 * (&proj + &proj.t()))
            }
        }
    }
}

/// Everything the frozen-kernel formulas need, bundled at one base point:
/// the thin SVD J_S = UΣVᵀ, the test map C₀ = J_Q V Σ⁻¹ on the mobile
/// singular space, the visibility Gramian Γ₀ = C₀ᵀC₀, the clean signal
/// coordinates ā = Uᵀ(ȳ − U_S(0)), and the noise covariance Σ_ζ of ζ = Uᵀξ.
///
/// Clean targets come from the dataset's noise record when present
/// (targets − noise); otherwise the targets are taken as noise-free and all
/// randomness lives in Σ_ζ.
#[derive(Clone, Debug)]
pub struct SpectralModel {
    pub(crate) u: Mat,
    pub(crate) sigma: Vector,
    pub(crate) v: Mat,
    pub(crate) c0: Mat,
    pub(crate) gamma0: Mat,
    pub(crate) a_bar: Vector,
    pub(crate) noise_cov: Mat,
    pub(crate) test_output0: Vector,
    pub(crate) num_train: usize,
}

impl SpectralModel {
    /// Left singular vectors of J_S, one column per mobile mode ((n·p)×r).
    pub fn u(&self) -> &Mat {
        &self.u
    }

    /// Positive singular values, descending.
    pub fn sigma(&self) -> &Vector {
        &self.sigma
    }

    /// Right singular vectors (d×r).
    pub fn v(&self) -> &Mat {
        &self.v
    }

    /// Test map C₀ = J_Q V Σ⁻¹ ((m·p)×r).
    pub fn c0(&self) -> &Mat {
        &self.c0
    }

    /// Visibility Gramian Γ₀ = C₀ᵀC₀ (r×r, PSD).
    pub fn gamma0(&self) -> &Mat {
        &self.gamma0
    }

    /// Clean signal coordinates ā = Uᵀ(ȳ − U_S(0)).
    pub fn a_bar(&self) -> &Vector {
        &self.a_bar
    }

    /// Noise covariance Σ_ζ in mobile coordinates (r×r, PSD).
    pub fn noise_cov(&self) -> &Mat {
        &self.noise_cov
    }

    /// Stacked test outputs at the base point.
    pub fn test_output0(&self) -> &Vector {
        &self.test_output0
    }

    /// Number of training examples n (the loss normalizer).
    pub fn num_train(&self) -> usize {
        self.num_train
    }

    /// Dimension r of the mobile singular space.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Mean filtered test output in the noise-free limit of full
    /// interpolation: Ū_Q = U_Q(0) + C₀ā.
    pub fn mean_test_output(&self) -> Vector {
        &self.test_output0 + &self.c0.dot(&self.a_bar)
    }
}

/// Builds the spectral model of `model` at its current weights.
///
/// The SVD is truncated at the relative tolerance `tol::RANK_TOL`, so Σ is
/// strictly positive; an all-zero Jacobian is rejected.
pub fn build_spectral_model(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    noise: &NoiseCovariance,
) -> Result<SpectralModel, FrozenKernelError> {
    let j_s = model.jacobian_stacked(train)?;
    let j_q = model.jacobian_stacked(test)?;

    let f = svd(&j_s);
    let r = f.rank(tol::RANK_TOL);
    if r == 0 {
        return Err(FrozenKernelError::DegenerateJacobian { tol: tol::RANK_TOL });
    }
    let u = f.u.slice(ndarray::s![.., ..r]).to_owned();
    let sigma = f.sigma.slice(ndarray::s![..r]).to_owned();
    let v = f.v.slice(ndarray::s![.., ..r]).to_owned();

    // C₀ = J_Q V Σ⁻¹, column j scaled by 1/σ_j.
    let mut c0 = j_q.dot(&v);
    for (j, mut col) in c0.columns_mut().into_iter().enumerate() {
        col.map_inplace(|x| *x /= sigma[j]);
    }
    let gamma0 = {
        let g = c0.t().dot(&c0);
        0.5 * (&g + &g.t())
    };

    let clean = train.clean_targets();
    let y_bar = Vector::from_iter(clean.iter().copied());
    let u_s0 = model.forward_stacked(train)?.into_vector();
    let a_bar = u.t().dot(&(&y_bar - &u_s0));

    let noise_cov = noise.project(&u)?;
    let test_output0 = model.forward_stacked(test)?.into_vector();

    debug_assert!({
        let recon = {
            let mut us = u.clone();
            for (j, mut col) in us.columns_mut().into_iter().enumerate() {
                col.map_inplace(|x| *x *= sigma[j]);
            }
            us.dot(&v.t())
        };
        fro_norm(&(&recon - &j_s)) <= 1e-9 * fro_norm(&j_s).max(1.0)
    });

    Ok(SpectralModel {
        u,
        sigma,
        v,
        c0,
        gamma0,
        a_bar,
        noise_cov,
        test_output0,
        num_train: train.num_examples(),
    })
}

/// A horizon at which every saturation filter entry rounds to 1 in f64:
/// the smallest rate min_j (σ_j² + nλ) satisfies (σ_j² + nλ)·t/n ≥ 40, so
/// every surviving exponential is below e⁻⁴⁰ ≈ 4.2e−18, under the f64
/// resolution of 1.
pub fn saturation_time(sigma: &Vector, num_train: usize, lambda: f64) -> f64 {
    let n = num_train as f64;
    let min_rate = sigma
        .iter()
        .map(|s| s * s + n * lambda)
        .fold(f64::INFINITY, f64::min);
    40.0 * n / min_rate
}
