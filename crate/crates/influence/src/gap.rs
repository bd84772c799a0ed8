//! Centered-trace gap estimation and the common holdout first variation.
//!
//! Deleting k training examples and renormalizing the remaining weights is,
//! to first order, the same perturbation for every k: averaging the
//! delete-k directions over all holdouts containing example i collapses to
//! a single mass-preserving vector ν⁽ⁱ⁾ = (n/(n−1)) C_n e_i, where
//! C_n = I − (1/n)11ᵀ centers data weights. Pairing ν⁽ⁱ⁾ against row i of
//! the influence matrix and averaging over i gives the one-run estimator
//! (1/(n−1))·tr(J·C_n) of the gap between population and training loss.

use itertools::Itertools;
use numerics::{eye, Mat, Vector};

use crate::{InfluenceError, InfluenceMatrix};

/// The data-weight centering projector C_n = I − (1/n)11ᵀ.
///
/// Idempotent and symmetric; annihilates uniform weight shifts and fixes
/// zero-sum reweightings.
#[derive(Clone, Copy, Debug)]
pub struct CenteringProjector {
    n: usize,
}

impl CenteringProjector {
    pub fn new(n: usize) -> CenteringProjector {
        assert!(n >= 1, "centering needs at least one example");
        CenteringProjector { n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense n×n matrix I − (1/n)11ᵀ.
    pub fn matrix(&self) -> Mat {
        let n = self.n;
        eye(n) - Mat::from_elem((n, n), 1.0 / n as f64)
    }

    /// Apply C_n to a weight vector: subtract the mean from every entry.
    pub fn apply(&self, v: &Vector) -> Vector {
        let mean = v.sum() / self.n as f64;
        v.mapv(|x| x - mean)
    }

    /// The common first-variation direction ν⁽ⁱ⁾ = (n/(n−1)) C_n e_i:
    /// entry 1 at i and −1/(n−1) elsewhere. Needs n ≥ 2.
    pub fn nu(&self, i: usize) -> Vector {
        let n = self.n;
        assert!(n >= 2, "holdout direction needs at least two examples");
        assert!(i < n, "example index {i} out of range for {n}");
        let off = -1.0 / (n - 1) as f64;
        let mut v = Vector::from_elem(n, off);
        v[i] = 1.0;
        v
    }
}

/// Result of the centered-trace gap estimator.
#[derive(Clone, Debug)]
pub struct GapEstimate {
    /// (1/(n−1)) tr(J C_n): one-run estimate of population − training loss.
    pub value: f64,
    /// Per-example contributions c_i = (1/(n−1))(J_ii − mean_j J_ij);
    /// the estimate is their sum. Large c_i flags examples whose deletion
    /// would move their own loss the most.
    pub contributions: Vector,
}

/// Estimate the generalization gap from the influence matrix alone:
/// (1/(n−1))·tr(J·C_n), with the per-example split of that trace.
///
/// The estimate is a first-order (in the holdout reweighting) surrogate for
/// the retrain-LOO gap, so its accuracy degrades with training horizon and
/// residual scale; tests pin a 30% agreement band on a noisy linear task.
pub fn gap_estimator(j: &InfluenceMatrix) -> GapEstimate {
    let m = j.matrix();
    let n = j.n();
    if n < 2 {
        return GapEstimate { value: 0.0, contributions: Vector::zeros(n) };
    }
    let scale = 1.0 / (n - 1) as f64;
    let mut contributions = Vector::zeros(n);
    for i in 0..n {
        let row_mean = m.row(i).sum() / n as f64;
        contributions[i] = scale * (m[(i, i)] - row_mean);
    }
    let value = contributions.sum();
    GapEstimate { value, contributions }
}

/// Average delete-k reweighting direction for example i, computed by
/// explicit enumeration of all size-k holdouts containing i.
///
/// Deleting holdout I and renormalizing the remaining mean puts weight
/// n/(n−k) on the survivors and 0 on I; the returned vector is the average
/// of (uniform − deleted) over every I ∋ i. The result equals ν⁽ⁱ⁾ =
/// (n/(n−1)) C_n e_i for every admissible k, which is what makes all
/// cross-validation faces share one first variation.
pub fn common_first_variation(n: usize, i: usize, k: usize) -> Result<Vector, InfluenceError> {
    if k < 1 || k > n.saturating_sub(1) {
        return Err(InfluenceError::InvalidHoldout { n, k });
    }
    if i >= n {
        return Err(InfluenceError::ExampleOutOfRange { index: i, n });
    }
    let survivors_weight = n as f64 / (n - k) as f64;
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let mut acc = Vector::zeros(n);
    let mut count = 0usize;
    for rest in others.iter().copied().combinations(k - 1) {
        // Holdout I = {i} ∪ rest; direction = uniform − renormalized.
        let mut direction = Vector::from_elem(n, 1.0 - survivors_weight);
        direction[i] = 1.0;
        for &j in &rest {
            direction[j] = 1.0;
        }
        acc = acc + direction;
        count += 1;
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use models::Loss;
    use numerics::fro_norm;

    // Tests build influence matrices directly; the adjoint pipeline is
    // exercised by the integration oracles.
    fn influence_from(mat: Mat) -> InfluenceMatrix {
        crate::adjoint::test_support::influence_from_matrix(mat, 1.0, Loss::Squared)
    }

    #[test]
    fn centering_is_idempotent_symmetric_and_kills_constants() {
        let c = CenteringProjector::new(5);
        let m = c.matrix();
        assert!(fro_norm(&(&m.dot(&m) - &m)) <= 1e-14);
        assert!(fro_norm(&(&m.t().to_owned() - &m)) <= 1e-14);
        let ones = Vector::ones(5);
        assert!(c.apply(&ones).iter().all(|&x| x.abs() <= 1e-15));
        assert!(m.dot(&ones).iter().all(|&x| x.abs() <= 1e-15));
    }

    #[test]
    fn identity_influence_estimates_its_diagonal_scale() {
        // J = cI: tr(J C_n) = c·tr(C_n) = c(n−1), estimator = c.
        let n = 6;
        let c = 0.37;
        let est = gap_estimator(&influence_from(eye(n) * c));
        assert_abs_diff_eq!(est.value, c, epsilon = 1e-12);
        assert_abs_diff_eq!(est.contributions.sum(), c, epsilon = 1e-12);
    }

    #[test]
    fn constant_influence_estimates_zero() {
        // J = c11ᵀ lies in the kernel of the centering projector.
        let n = 5;
        let est = gap_estimator(&influence_from(Mat::from_elem((n, n), 2.9)));
        assert_abs_diff_eq!(est.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn contributions_sum_to_the_trace_form() {
        let n = 4;
        let mut m = Mat::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = ((3 * i + 5 * j + 1) % 7) as f64 - 3.0;
            }
        }
        let cn = CenteringProjector::new(n).matrix();
        let trace_form = m.dot(&cn).diag().sum() / (n - 1) as f64;
        let est = gap_estimator(&influence_from(m));
        assert_abs_diff_eq!(est.value, trace_form, epsilon = 1e-12);
        assert_abs_diff_eq!(est.contributions.sum(), trace_form, epsilon = 1e-12);
    }

    #[test]
    fn three_examples_single_deletion_direction() {
        let v = common_first_variation(3, 0, 1).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(v[2], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn averaged_direction_is_holdout_size_independent() {
        let n = 7;
        for i in [0, 3, 6] {
            let nu = CenteringProjector::new(n).nu(i);
            for k in 1..n {
                let v = common_first_variation(n, i, k).unwrap();
                for j in 0..n {
                    assert!(
                        (v[j] - nu[j]).abs() <= 1e-12,
                        "k = {k}, entry {j}: {} vs {}",
                        v[j],
                        nu[j]
                    );
                }
            }
        }
    }

    #[test]
    fn directions_preserve_total_mass() {
        for (n, i, k) in [(4, 1, 2), (6, 5, 3), (9, 0, 8)] {
            let v = common_first_variation(n, i, k).unwrap();
            assert!(v.sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn invalid_holdout_sizes_are_rejected() {
        assert!(matches!(
            common_first_variation(5, 0, 0),
            Err(InfluenceError::InvalidHoldout { n: 5, k: 0 })
        ));
        assert!(matches!(
            common_first_variation(5, 0, 5),
            Err(InfluenceError::InvalidHoldout { n: 5, k: 5 })
        ));
        assert!(matches!(
            common_first_variation(5, 7, 2),
            Err(InfluenceError::ExampleOutOfRange { index: 7, n: 5 })
        ));
    }
}
