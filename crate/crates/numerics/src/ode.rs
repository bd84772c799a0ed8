use crate::linalg::NumericsError;
use crate::{Mat, Vector};

/// A fixed-step integration record: uniform time grid spanning [s, T] and one
/// state per grid point, the first being the initial condition exactly.
#[derive(Debug, Clone)]
pub struct OdeSolution<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

impl<S> OdeSolution<S> {
    pub fn final_state(&self) -> &S {
        self.states.last().expect("solution has at least the initial state")
    }
}

/// Linear-space operations RK4 needs from a state type.
pub trait OdeState: Clone {
    fn axpy(&mut self, a: f64, x: &Self);
    fn is_finite(&self) -> bool;
}

impl OdeState for Vector {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.scaled_add(a, x);
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl OdeState for Mat {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.scaled_add(a, x);
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Classical fixed-step RK4 over [s, T] with `steps` uniform steps. `T < s`
/// integrates backward (negative step), which the dual/adjoint solves rely on.
/// Deterministic: no step-size adaptation, no tolerance heuristics.
pub fn rk4<S, F>(mut f: F, x0: &S, s: f64, t: f64, steps: usize) -> Result<OdeSolution<S>, NumericsError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
{
    assert!(steps >= 1, "rk4 requires at least one step");
    let h = (t - s) / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(s);
    states.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..steps {
        let tk = s + h * k as f64;
        let k1 = f(tk, &x);
        if !k1.is_finite() {
            return Err(NumericsError::NonFiniteDerivative { time: tk });
        }
        let mut x2 = x.clone();
        x2.axpy(0.5 * h, &k1);
        let k2 = f(tk + 0.5 * h, &x2);
        let mut x3 = x.clone();
        x3.axpy(0.5 * h, &k2);
        let k3 = f(tk + 0.5 * h, &x3);
        let mut x4 = x.clone();
        x4.axpy(h, &k3);
        let k4 = f(tk + h, &x4);
        if !(k2.is_finite() && k3.is_finite() && k4.is_finite()) {
            return Err(NumericsError::NonFiniteDerivative { time: tk + h });
        }
        x.axpy(h / 6.0, &k1);
        x.axpy(h / 3.0, &k2);
        x.axpy(h / 3.0, &k3);
        x.axpy(h / 6.0, &k4);
        if !x.is_finite() {
            return Err(NumericsError::NonFiniteDerivative { time: tk + h });
        }
        let tk1 = if k + 1 == steps { t } else { s + h * (k + 1) as f64 };
        times.push(tk1);
        states.push(x.clone());
    }
    Ok(OdeSolution { times, states })
}

/// RK4 for vector-valued states.
pub fn ode_rk4<F>(f: F, x0: &Vector, s: f64, t: f64, steps: usize) -> Result<OdeSolution<Vector>, NumericsError>
where
    F: FnMut(f64, &Vector) -> Vector,
{
    rk4(f, x0, s, t, steps)
}

/// RK4 for matrix-valued states (propagators, adjoint bundles).
pub fn ode_rk4_mat<F>(f: F, x0: &Mat, s: f64, t: f64, steps: usize) -> Result<OdeSolution<Mat>, NumericsError>
where
    F: FnMut(f64, &Mat) -> Mat,
{
    rk4(f, x0, s, t, steps)
}
