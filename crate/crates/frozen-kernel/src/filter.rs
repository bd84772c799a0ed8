//! Self-adjoint contractions 0 ⪯ M ⪯ I on the mobile singular space.
//!
//! Three of the five instances are diagonal in the singular basis (gradient
//! flow, ridge, threshold). Rank truncation projects onto leading
//! eigenvectors of Γ₀, which is a dense matrix in that basis. Identity is
//! the full-interpolation endpoint.

use numerics::{sym_eig, tol, Mat, Vector};

use crate::spectral::SpectralModel;
use crate::FrozenKernelError;

/// The five filters. Each is a rule for how much of every mobile mode the
/// training procedure commits to the output.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterKind {
    /// Saturation filter of gradient flow: M_j = 1 − e^{−t·σ_j²/n}.
    GradientFlow { time: f64 },
    /// Ridge shrinkage: M_j = σ_j²/(σ_j² + n·shrinkage).
    Ridge { shrinkage: f64 },
    /// Hard threshold on mode mobility: M_j = 1 iff σ_j² ≥ cutoff.
    Threshold { cutoff: f64 },
    /// Projector onto the `modes` leading eigenvectors of Γ₀ (predictive
    /// rank truncation).
    Rank { modes: usize },
    /// Full interpolation, M = I.
    Identity,
}

enum FilterRepr {
    Diagonal(Vector),
    Dense(Mat),
}

/// A realized filter: the kind it came from plus its matrix action on the
/// r-dimensional singular space.
pub struct Filter {
    kind: FilterKind,
    repr: FilterRepr,
}

impl Filter {
    pub fn kind(&self) -> &FilterKind {
        &self.kind
    }

    /// Dimension r the filter acts on.
    pub fn dim(&self) -> usize {
        match &self.repr {
            FilterRepr::Diagonal(d) => d.len(),
            FilterRepr::Dense(m) => m.nrows(),
        }
    }

    /// Diagonal entries when the filter is diagonal in the singular basis.
    pub fn diagonal(&self) -> Option<&Vector> {
        match &self.repr {
            FilterRepr::Diagonal(d) => Some(d),
            FilterRepr::Dense(_) => None,
        }
    }

    /// Dense r×r matrix of the filter.
    pub fn to_matrix(&self) -> Mat {
        match &self.repr {
            FilterRepr::Diagonal(d) => Mat::from_diag(d),
            FilterRepr::Dense(m) => m.clone(),
        }
    }

    /// M·x.
    pub fn apply(&self, x: &Vector) -> Vector {
        match &self.repr {
            FilterRepr::Diagonal(d) => d * x,
            FilterRepr::Dense(m) => m.dot(x),
        }
    }
}

/// Realizes a filter kind against the spectrum (and, for rank truncation,
/// the Γ₀ eigenbasis) of `sm`.
pub fn make_filter(kind: FilterKind, sm: &SpectralModel) -> Result<Filter, FrozenKernelError> {
    let r = sm.rank();
    let n = sm.num_train() as f64;
    let repr = match &kind {
        FilterKind::GradientFlow { time } => {
            if !time.is_finite() || *time < 0.0 {
                return Err(FrozenKernelError::InvalidFilter(format!(
                    "gradient-flow time must be finite and non-negative, got {time}"
                )));
            }
            FilterRepr::Diagonal(sm.sigma().mapv(|s| 1.0 - (-time * s * s / n).exp()))
        }
        FilterKind::Ridge { shrinkage } => {
            if !shrinkage.is_finite() || *shrinkage <= 0.0 {
                return Err(FrozenKernelError::InvalidFilter(format!(
                    "ridge shrinkage must be finite and positive, got {shrinkage}"
                )));
            }
            FilterRepr::Diagonal(sm.sigma().mapv(|s| s * s / (s * s + n * shrinkage)))
        }
        FilterKind::Threshold { cutoff } => {
            if !cutoff.is_finite() || *cutoff < 0.0 {
                return Err(FrozenKernelError::InvalidFilter(format!(
                    "threshold cutoff must be finite and non-negative, got {cutoff}"
                )));
            }
            FilterRepr::Diagonal(
                sm.sigma()
                    .mapv(|s| if s * s >= *cutoff { 1.0 } else { 0.0 }),
            )
        }
        FilterKind::Rank { modes } => {
            if *modes > r {
                return Err(FrozenKernelError::InvalidFilter(format!(
                    "rank truncation keeps {modes} modes but the space has dimension {r}"
                )));
            }
            let eig = sym_eig(sm.gamma0())?;
            let psi = eig.eigenvectors.slice(ndarray::s![.., ..*modes]).to_owned();
            FilterRepr::Dense(psi.dot(&psi.t()))
        }
        FilterKind::Identity => FilterRepr::Diagonal(Vector::ones(r)),
    };

    if let FilterRepr::Diagonal(d) = &repr {
        debug_assert!(d.iter().all(|&x| (-tol::RANK_TOL..=1.0 + tol::RANK_TOL).contains(&x)));
    }
    Ok(Filter { kind, repr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{build_spectral_model, saturation_time, NoiseCovariance};
    use models::{make_dataset, Dataset, DatasetMeta, GeneratorSpec, Model};
    use numerics::fro_norm;

    /// Spectral model over a diagonal data matrix so the singular values are
    /// exactly the supplied entries.
    fn diagonal_model(sigmas: &[f64]) -> SpectralModel {
        let n = sigmas.len();
        let mut x = Mat::zeros((n, n));
        for (i, &s) in sigmas.iter().enumerate() {
            x[(i, i)] = s;
        }
        let meta = DatasetMeta {
            generator: "diag".into(),
            seed: 0,
        };
        let train = Dataset::new(x, Mat::zeros((n, 1)), None, meta).unwrap();
        let test = make_dataset(
            &GeneratorSpec::LinearGaussian {
                num_examples: 3,
                input_dim: n,
                output_dim: 1,
            },
            5,
        )
        .unwrap();
        let model = Model::linear(n, 1, 9);
        build_spectral_model(
            &model,
            &train,
            &test,
            &NoiseCovariance::Isotropic { variance: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn gradient_flow_starts_closed_and_saturates_open() {
        let sm = diagonal_model(&[2.0, 1.0, 0.5]);
        let at_zero = make_filter(FilterKind::GradientFlow { time: 0.0 }, &sm).unwrap();
        assert!(at_zero.diagonal().unwrap().iter().all(|&x| x == 0.0));

        let t = saturation_time(sm.sigma(), sm.num_train(), 0.0);
        let at_inf = make_filter(FilterKind::GradientFlow { time: t }, &sm).unwrap();
        for &m in at_inf.diagonal().unwrap() {
            assert!((m - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ridge_entry_is_half_at_matched_shrinkage() {
        let sm = diagonal_model(&[2.0, 1.0]);
        // σ₁² = 4 and n = 2, so shrinkage 2 makes n·shrinkage = σ₁².
        let f = make_filter(FilterKind::Ridge { shrinkage: 2.0 }, &sm).unwrap();
        assert!((f.diagonal().unwrap()[0] - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn threshold_keeps_exactly_the_mobile_enough_modes() {
        let sm = diagonal_model(&[3.0, 2.0, 1.0]);
        let f = make_filter(FilterKind::Threshold { cutoff: 4.0 }, &sm).unwrap();
        let d = f.diagonal().unwrap();
        // σ² = 9, 4, 1; the boundary mode σ² = 4 is kept (closed interval).
        assert_eq!(d.as_slice().unwrap(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn rank_filter_is_an_orthogonal_projector() {
        let sm = diagonal_model(&[2.5, 1.5, 0.75, 0.25]);
        let f = make_filter(FilterKind::Rank { modes: 2 }, &sm).unwrap();
        let m = f.to_matrix();
        assert!(fro_norm(&(&m.dot(&m) - &m)) <= 1e-12);
        assert!(fro_norm(&(&m - &m.t())) <= 1e-12);
        let trace: f64 = m.diag().sum();
        assert!((trace - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let sm = diagonal_model(&[1.0, 0.5]);
        assert!(make_filter(FilterKind::GradientFlow { time: -1.0 }, &sm).is_err());
        assert!(make_filter(FilterKind::Ridge { shrinkage: 0.0 }, &sm).is_err());
        assert!(make_filter(FilterKind::Threshold { cutoff: f64::NAN }, &sm).is_err());
        assert!(make_filter(FilterKind::Rank { modes: 3 }, &sm).is_err());
    }

    #[test]
    fn identity_filter_is_all_ones() {
        let sm = diagonal_model(&[1.0, 0.5]);
        let f = make_filter(FilterKind::Identity, &sm).unwrap();
        assert!(f.diagonal().unwrap().iter().all(|&x| x == 1.0));
        assert_eq!(f.dim(), 2);
    }
}
