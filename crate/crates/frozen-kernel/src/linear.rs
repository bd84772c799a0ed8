//! Closed forms for constant-Jacobian (linear) training under squared loss:
//! the window operators as spectral functions of the data kernel, and
//! weight-decayed gradient flow solved mode by mode.

use ndarray::s;
use models::{Dataset, Model};
use numerics::{svd, sym_eig, tol, Mat, Vector};

use crate::FrozenKernelError;

/// The four window operators of a constant-kernel flow on [0, T].
#[derive(Clone, Debug)]
pub struct LinearOperators {
    /// Propagator e^{−T·K/n}.
    pub propagator: Mat,
    /// Cumulative dissipation (n/2)(I − e^{−2T·K/n}) on the mobile space.
    pub dissipation: Mat,
    /// Training displacement n(I − e^{−T·K/n}) on the mobile space.
    pub displacement: Mat,
    /// Test transfer K_QS·K⁻¹·n(I − e^{−T·K/n}) on the mobile space.
    pub transfer: Mat,
}

/// Evaluates the closed forms from the two Jacobians, which stay constant
/// along the whole flow for a linear model. `num_train` is the loss
/// normalizer n; each operator is a scalar function of the kernel spectrum
/// applied through its eigenbasis.
pub fn linear_window_operators(
    train_jacobian: &Mat,
    test_jacobian: &Mat,
    num_train: usize,
    horizon: f64,
) -> Result<LinearOperators, FrozenKernelError> {
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(FrozenKernelError::BadHorizon(horizon));
    }
    let n = num_train as f64;
    let kernel = train_jacobian.dot(&train_jacobian.t());
    let eig = sym_eig(&kernel)?;
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let cut = tol::RANK_TOL * lmax;

    let propagator = eig.apply_fn(|l| (-horizon * l / n).exp());
    let dissipation = eig.apply_fn(|l| {
        if l > cut {
            0.5 * n * (1.0 - (-2.0 * horizon * l / n).exp())
        } else {
            0.0
        }
    });
    let displacement = eig.apply_fn(|l| {
        if l > cut {
            n * (1.0 - (-horizon * l / n).exp())
        } else {
            0.0
        }
    });
    let cross = test_jacobian.dot(&train_jacobian.t());
    let transfer = cross.dot(&eig.apply_fn(|l| {
        if l > cut {
            n / l * (1.0 - (-horizon * l / n).exp())
        } else {
            0.0
        }
    }));

    Ok(LinearOperators {
        propagator,
        dissipation,
        displacement,
        transfer,
    })
}

/// Weight-decayed gradient flow of a scalar linear model, solved in closed
/// form.
#[derive(Clone, Debug)]
pub struct RidgeFlow {
    /// Weights at the horizon.
    pub weights: Vector,
    /// Output-space filter entries M_j = σ_j²/(σ_j²+nλ)·(1−e^{−(σ_j²+nλ)t/n})
    /// for the flow started at zero weights.
    pub filter: Vector,
    pub lambda: f64,
    pub horizon: f64,
}

/// Integrates ∂_t w = −(1/n)Xᵀ(Xw − y) − λw analytically from the model's
/// current weights.
///
/// In the right-singular basis each coefficient relaxes to its ridge fixed
/// point σ_j·a_j/(σ_j²+nλ) at rate (σ_j²+nλ)/n, and every component outside
/// the row space of X decays as e^{−λt}. The reported filter column is the
/// zero-start output filter, which is the quantity the bias–variance
/// decomposition consumes.
pub fn ridge_flow(
    model: &Model,
    data: &Dataset,
    lambda: f64,
    horizon: f64,
) -> Result<RidgeFlow, FrozenKernelError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FrozenKernelError::BadWeightDecay(lambda));
    }
    if !horizon.is_finite() || horizon < 0.0 {
        return Err(FrozenKernelError::BadHorizon(horizon));
    }
    if model.output_dim() != 1 || model.num_weights() != data.input_dim() {
        return Err(FrozenKernelError::NotLinearScalar(format!(
            "{} weights, {} inputs, {} outputs",
            model.num_weights(),
            data.input_dim(),
            model.output_dim()
        )));
    }

    let x = model.jacobian_stacked(data)?;
    let n = data.num_examples() as f64;
    let y = data.targets_flat();
    let f = svd(&x);
    let r = f.rank(tol::RANK_TOL);
    let u = f.u.slice(s![.., ..r]).to_owned();
    let sigma = f.sigma.slice(s![..r]).to_owned();
    let v = f.v.slice(s![.., ..r]).to_owned();

    let a = u.t().dot(&y);
    let w0 = model.weights();
    let alpha0 = v.t().dot(w0);
    let w_perp = w0 - &v.dot(&alpha0);

    let mut alpha = Vector::zeros(r);
    let mut filter = Vector::zeros(r);
    for j in 0..r {
        let s2 = sigma[j] * sigma[j];
        let rate = (s2 + n * lambda) / n;
        let decay = (-rate * horizon).exp();
        let fixed = sigma[j] * a[j] / (s2 + n * lambda);
        alpha[j] = fixed + (alpha0[j] - fixed) * decay;
        filter[j] = s2 / (s2 + n * lambda) * (1.0 - decay);
    }

    let weights = v.dot(&alpha) + w_perp * (-lambda * horizon).exp();
    Ok(RidgeFlow {
        weights,
        filter,
        lambda,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::saturation_time;
    use models::{make_dataset, GeneratorSpec};
    use numerics::{fro_norm, ode_rk4, pinv, vec_norm};

    fn noisy_problem(seed: u64, n: usize, d: usize) -> (Model, Dataset) {
        let data = make_dataset(
            &GeneratorSpec::NoisyTeacher {
                num_examples: n,
                input_dim: d,
                output_dim: 1,
                noise_std: 0.4,
            },
            seed,
        )
        .unwrap();
        (Model::linear(d, 1, seed + 100), data)
    }

    #[test]
    fn zero_horizon_is_the_starting_point() {
        let (model, data) = noisy_problem(1, 6, 4);
        let flow = ridge_flow(&model, &data, 0.3, 0.0).unwrap();
        assert!(vec_norm(&(&flow.weights - model.weights())) <= 1e-14);
        assert!(flow.filter.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn positive_decay_converges_to_ridge_regression() {
        let (mut model, data) = noisy_problem(2, 8, 5);
        model.set_weights(Vector::zeros(5)).unwrap();
        let lambda = 0.2;
        let x = data.inputs().to_owned();
        let n = data.num_examples() as f64;

        let t = saturation_time(&svd(&x).sigma, data.num_examples(), lambda);
        let flow = ridge_flow(&model, &data, lambda, t).unwrap();

        // Xᵀ(XXᵀ + nλI)⁻¹ y through the kernel eigenbasis.
        let kernel = x.dot(&x.t());
        let shifted_inv = sym_eig(&kernel).unwrap().apply_fn(|l| 1.0 / (l + n * lambda));
        let ridge = x.t().dot(&shifted_inv.dot(&data.targets_flat()));
        assert!(vec_norm(&(&flow.weights - &ridge)) <= 1e-8 * vec_norm(&ridge).max(1.0));
    }

    #[test]
    fn zero_decay_converges_to_the_minimum_norm_interpolant() {
        let (mut model, data) = noisy_problem(3, 5, 9);
        model.set_weights(Vector::zeros(9)).unwrap();
        let x = data.inputs().to_owned();
        let t = saturation_time(&svd(&x).sigma, data.num_examples(), 0.0);
        let flow = ridge_flow(&model, &data, 0.0, t).unwrap();

        let min_norm = pinv(&x, tol::RANK_TOL).unwrap().dot(&data.targets_flat());
        assert!(vec_norm(&(&flow.weights - &min_norm)) <= 1e-8 * vec_norm(&min_norm).max(1.0));
    }

    #[test]
    fn out_of_subspace_components_decay_at_the_bare_rate() {
        // d > n leaves a nontrivial orthogonal complement of the row space.
        let (model, data) = noisy_problem(4, 4, 7);
        let x = data.inputs().to_owned();
        let f = svd(&x);
        let r = f.rank(tol::RANK_TOL);
        let v = f.v.slice(s![.., ..r]).to_owned();

        let lambda = 0.5;
        let horizon = 2.0;
        let flow = ridge_flow(&model, &data, lambda, horizon).unwrap();

        let perp = |w: &Vector| w - &v.dot(&v.t().dot(w));
        let before = perp(model.weights());
        let after = perp(&flow.weights);
        let expected = vec_norm(&before) * (-lambda * horizon).exp();
        assert!((vec_norm(&after) - expected).abs() <= 1e-10 * expected.max(1.0));
    }

    #[test]
    fn closed_form_matches_direct_integration() {
        for seed in [11, 12, 13, 14, 15] {
            let (model, data) = noisy_problem(seed, 7, 5);
            let lambda = 0.15;
            let horizon = 3.0;
            let x = data.inputs().to_owned();
            let y = data.targets_flat();
            let n = data.num_examples() as f64;

            let sol = ode_rk4(
                |_, w: &Vector| {
                    let residual = x.dot(w) - &y;
                    -(x.t().dot(&residual)) / n - lambda * w
                },
                model.weights(),
                0.0,
                horizon,
                1200,
            )
            .unwrap();
            let flow = ridge_flow(&model, &data, lambda, horizon).unwrap();
            let gap = vec_norm(&(&flow.weights - sol.final_state()));
            assert!(gap <= 1e-6, "seed {seed}: gap {gap:e}");
        }
    }

    #[test]
    fn window_operators_match_a_fine_trapezoid_quadrature() {
        let (model, train) = noisy_problem(21, 6, 4);
        let test = make_dataset(
            &GeneratorSpec::LinearGaussian {
                num_examples: 3,
                input_dim: 4,
                output_dim: 1,
            },
            22,
        )
        .unwrap();
        let x = model.jacobian_stacked(&train).unwrap();
        let xq = model.jacobian_stacked(&test).unwrap();
        let n = train.num_examples() as f64;
        let horizon = 1.7;
        let ops = linear_window_operators(&x, &xq, train.num_examples(), horizon).unwrap();

        // Independent Simpson quadrature of each defining integral over a
        // fine grid, using only matrix exponentials of the kernel.
        let kernel = x.dot(&x.t());
        let eig = sym_eig(&kernel).unwrap();
        let prop_at = |t: f64| eig.apply_fn(|l| (-t * l / n).exp());
        let steps = 2000;
        let h = horizon / steps as f64;
        let kqs = xq.dot(&x.t());
        let mut w_quad = Mat::zeros(kernel.dim());
        let mut d_quad = Mat::zeros(kernel.dim());
        let mut g_quad = Mat::zeros((kqs.nrows(), kqs.ncols()));
        for k in 0..=steps {
            let weight = h / 3.0
                * if k == 0 || k == steps {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
            let p = prop_at(k as f64 * h);
            w_quad = w_quad + weight * &p.t().dot(&kernel).dot(&p);
            d_quad = d_quad + weight * &kernel.dot(&p);
            g_quad = g_quad + weight * &kqs.dot(&p);
        }

        let rel = |a: &Mat, b: &Mat| fro_norm(&(a - b)) / fro_norm(b).max(1.0);
        assert!(rel(&ops.dissipation, &w_quad) <= 1e-6);
        assert!(rel(&ops.displacement, &d_quad) <= 1e-6);
        assert!(rel(&ops.transfer, &g_quad) <= 1e-6);
        assert!(fro_norm(&(&ops.propagator - &prop_at(horizon))) <= 1e-10);
    }
}
