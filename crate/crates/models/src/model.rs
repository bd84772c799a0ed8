//! Model zoo: linear maps and small dense MLPs with exact derivatives.
//!
//! Derivatives are computed by hand-written per-example backpropagation.
//! There is no tape: the models are small enough that explicit loops are
//! both faster and easier to audit, and the operator stack downstream needs
//! exact Jacobian rows, not stochastic estimates. Curvature is available as
//! an exact Hessian-vector product via the standard forward-over-reverse
//! construction (R-operator), which never materializes the d×d Hessian.

use ndarray::{ArrayView1, ArrayView2};
use numerics::{seeded_rng, Mat, Vector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Dataset, Loss, ModelError};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// σ'(z).
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// σ''(z). ReLU is piecewise linear, so its second derivative vanishes
    /// almost everywhere; the kink at zero is measure zero along any
    /// trajectory we integrate.
    fn second_deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Linear {
        input_dim: usize,
        output_dim: usize,
    },
    Mlp {
        /// Layer widths, input first, output last. Length ≥ 2.
        layers: Vec<usize>,
        activation: Activation,
    },
}

/// Concatenated per-example outputs: block i holds F(w, z_i).
#[derive(Clone, Debug)]
pub struct StackedOutputs {
    u: Vector,
    n: usize,
    p: usize,
}

impl StackedOutputs {
    /// The np-vector of stacked outputs.
    pub fn as_vector(&self) -> &Vector {
        &self.u
    }

    pub fn into_vector(self) -> Vector {
        self.u
    }

    /// Output block for example i.
    pub fn block(&self, i: usize) -> ArrayView1<'_, f64> {
        self.u.slice(ndarray::s![i * self.p..(i + 1) * self.p])
    }

    pub fn num_examples(&self) -> usize {
        self.n
    }

    pub fn output_dim(&self) -> usize {
        self.p
    }
}

/// A differentiable map F(w, ·): ℝ^{input_dim} → ℝ^{output_dim} with flat
/// weight vector w ∈ ℝ^d.
#[derive(Clone, Debug)]
pub struct Model {
    kind: Kind,
    weights: Vector,
}

/// Activations and pre-activations of one forward pass, kept for backprop.
struct ForwardCache {
    /// a_0 = x, a_l = σ(z_l) for hidden layers, a_L = z_L at the output.
    activations: Vec<Vector>,
    /// z_1, …, z_L.
    preacts: Vec<Vector>,
}

impl Model {
    /// Linear model u = W x with W ∈ ℝ^{output_dim×input_dim} stored
    /// row-major, no bias. Weights are i.i.d. N(0, 1/input_dim).
    pub fn linear(input_dim: usize, output_dim: usize, seed: u64) -> Model {
        let mut rng = seeded_rng(seed);
        let std = 1.0 / (input_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = Vector::from_shape_fn(input_dim * output_dim, |_| normal.sample(&mut rng));
        Model {
            kind: Kind::Linear {
                input_dim,
                output_dim,
            },
            weights,
        }
    }

    /// Dense MLP with the given layer widths (input width first, output width
    /// last). Hidden layers apply the activation; the output layer is linear.
    /// Weights are i.i.d. N(0, 1/fan_in), biases start at zero.
    pub fn mlp(layers: &[usize], activation: Activation, seed: u64) -> Result<Model, ModelError> {
        if layers.len() < 2 || layers.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidGenerator(format!(
                "MLP needs at least two nonzero layer widths, got {layers:?}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let mut weights = Vec::new();
        for l in 0..layers.len() - 1 {
            let (fan_in, fan_out) = (layers[l], layers[l + 1]);
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("finite std");
            weights.extend((0..fan_out * fan_in).map(|_| normal.sample(&mut rng)));
            weights.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Ok(Model {
            kind: Kind::Mlp {
                layers: layers.to_vec(),
                activation,
            },
            weights: Vector::from_vec(weights),
        })
    }

    pub fn input_dim(&self) -> usize {
        match &self.kind {
            Kind::Linear { input_dim, .. } => *input_dim,
            Kind::Mlp { layers, .. } => layers[0],
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.kind {
            Kind::Linear { output_dim, .. } => *output_dim,
            Kind::Mlp { layers, .. } => *layers.last().unwrap(),
        }
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    /// Replace the flat weight vector. The length must match.
    pub fn set_weights(&mut self, w: Vector) -> Result<(), ModelError> {
        if w.len() != self.weights.len() {
            return Err(ModelError::WeightLenMismatch {
                expected: self.weights.len(),
                got: w.len(),
            });
        }
        self.weights = w;
        Ok(())
    }

    /// In-place weight update w ← w + scale·direction.
    pub fn step_weights(&mut self, direction: &Vector, scale: f64) -> Result<(), ModelError> {
        if direction.len() != self.weights.len() {
            return Err(ModelError::WeightLenMismatch {
                expected: self.weights.len(),
                got: direction.len(),
            });
        }
        self.weights.scaled_add(scale, direction);
        Ok(())
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::InputDimMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<(), ModelError> {
        if data.input_dim() != self.input_dim() {
            return Err(ModelError::InputDimMismatch {
                expected: self.input_dim(),
                got: data.input_dim(),
            });
        }
        if data.output_dim() != self.output_dim() {
            return Err(ModelError::OutputDimMismatch {
                expected: self.output_dim(),
                got: data.output_dim(),
            });
        }
        Ok(())
    }

    /// View of weight layer l as (W_l, b_l). Only valid for MLPs.
    fn layer_views(&self, layers: &[usize], l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let mut offset = 0;
        for k in 0..l {
            offset += layers[k + 1] * (layers[k] + 1);
        }
        let (rows, cols) = (layers[l + 1], layers[l]);
        let slice = self.weights.as_slice().expect("contiguous weights");
        let w = ArrayView2::from_shape((rows, cols), &slice[offset..offset + rows * cols])
            .expect("layer shape");
        let b = ArrayView1::from(&slice[offset + rows * cols..offset + rows * cols + rows]);
        (w, b)
    }

    /// Offset of W_l within the flat weight vector; biases sit right after.
    fn layer_offset(layers: &[usize], l: usize) -> usize {
        (0..l).map(|k| layers[k + 1] * (layers[k] + 1)).sum()
    }

    fn forward_cached(&self, x: ArrayView1<f64>) -> ForwardCache {
        match &self.kind {
            Kind::Linear {
                input_dim,
                output_dim,
            } => {
                let w = ArrayView2::from_shape(
                    (*output_dim, *input_dim),
                    self.weights.as_slice().expect("contiguous weights"),
                )
                .expect("weight shape");
                let u = w.dot(&x);
                ForwardCache {
                    activations: vec![x.to_owned(), u.clone()],
                    preacts: vec![u],
                }
            }
            Kind::Mlp { layers, activation } => {
                let depth = layers.len() - 1;
                let mut activations = Vec::with_capacity(depth + 1);
                let mut preacts = Vec::with_capacity(depth);
                activations.push(x.to_owned());
                for l in 0..depth {
                    let (w, b) = self.layer_views(layers, l);
                    let z = w.dot(activations.last().unwrap()) + &b;
                    let a = if l + 1 < depth {
                        z.mapv(|v| activation.apply(v))
                    } else {
                        z.clone()
                    };
                    preacts.push(z);
                    activations.push(a);
                }
                ForwardCache {
                    activations,
                    preacts,
                }
            }
        }
    }

    /// F(w, x) for a single input.
    pub fn forward_one(&self, x: ArrayView1<f64>) -> Result<Vector, ModelError> {
        self.check_input(x)?;
        let mut cache = self.forward_cached(x);
        Ok(cache.activations.pop().expect("nonempty activation stack"))
    }

    /// Stacked outputs U(w) over the whole dataset.
    pub fn forward_stacked(&self, data: &Dataset) -> Result<StackedOutputs, ModelError> {
        self.check_dataset(data)?;
        let (n, p) = (data.num_examples(), self.output_dim());
        let mut u = Vector::zeros(n * p);
        for i in 0..n {
            let mut cache = self.forward_cached(data.input(i));
            let out = cache.activations.pop().expect("nonempty activation stack");
            u.slice_mut(ndarray::s![i * p..(i + 1) * p]).assign(&out);
        }
        Ok(StackedOutputs { u, n, p })
    }

    /// Backpropagate a bundle of output-space seed rows through one cached
    /// forward pass: given S (m×p), returns S·J ∈ ℝ^{m×d}, i.e. row k is
    /// J(x)ᵀ s_k.
    fn backprop_rows(&self, cache: &ForwardCache, seeds: &Mat) -> Mat {
        let d = self.num_weights();
        let m = seeds.nrows();
        let mut out = Mat::zeros((m, d));
        match &self.kind {
            Kind::Linear { input_dim, .. } => {
                let x = &cache.activations[0];
                for k in 0..m {
                    for i in 0..seeds.ncols() {
                        let s = seeds[(k, i)];
                        if s != 0.0 {
                            for j in 0..*input_dim {
                                out[(k, i * input_dim + j)] = s * x[j];
                            }
                        }
                    }
                }
                out
            }
            Kind::Mlp { layers, activation } => {
                let depth = layers.len() - 1;
                // delta[k, :] is ∂(s_kᵀu)/∂z_{l+1} while walking layers backwards.
                let mut delta = seeds.clone();
                for l in (0..depth).rev() {
                    let (w, _) = self.layer_views(layers, l);
                    let a = &cache.activations[l];
                    let offset = Model::layer_offset(layers, l);
                    let (rows, cols) = (layers[l + 1], layers[l]);
                    for k in 0..m {
                        for i in 0..rows {
                            let dk = delta[(k, i)];
                            if dk != 0.0 {
                                for j in 0..cols {
                                    out[(k, offset + i * cols + j)] = dk * a[j];
                                }
                            }
                            out[(k, offset + rows * cols + i)] = dk;
                        }
                    }
                    if l > 0 {
                        let z = &cache.preacts[l - 1];
                        let mut next = Mat::zeros((m, cols));
                        for k in 0..m {
                            for j in 0..cols {
                                let mut acc = 0.0;
                                for i in 0..rows {
                                    acc += delta[(k, i)] * w[(i, j)];
                                }
                                next[(k, j)] = acc * activation.deriv(z[j]);
                            }
                        }
                        delta = next;
                    }
                }
                out
            }
        }
    }

    /// Hidden-layer preactivations z_1, …, z_{L−1} for one input (empty for
    /// linear models). Useful for dead-unit diagnostics and for deciding
    /// whether a ReLU network is differentiable on a whole neighborhood.
    pub fn hidden_preactivations(&self, x: ArrayView1<f64>) -> Result<Vec<Vector>, ModelError> {
        self.check_input(x)?;
        let mut cache = self.forward_cached(x);
        cache.preacts.pop();
        Ok(cache.preacts)
    }

    /// Exact per-example Jacobian J(x) ∈ ℝ^{p×d}.
    pub fn jacobian_one(&self, x: ArrayView1<f64>) -> Result<Mat, ModelError> {
        self.check_input(x)?;
        let cache = self.forward_cached(x);
        let eye = Mat::eye(self.output_dim());
        Ok(self.backprop_rows(&cache, &eye))
    }

    /// Stacked Jacobian: rows (i·p)..((i+1)·p) hold J(z_i).
    pub fn jacobian_stacked(&self, data: &Dataset) -> Result<Mat, ModelError> {
        self.check_dataset(data)?;
        let (n, p, d) = (data.num_examples(), self.output_dim(), self.num_weights());
        let mut j = Mat::zeros((n * p, d));
        let eye = Mat::eye(p);
        for i in 0..n {
            let cache = self.forward_cached(data.input(i));
            let block = self.backprop_rows(&cache, &eye);
            j.slice_mut(ndarray::s![i * p..(i + 1) * p, ..]).assign(&block);
        }
        Ok(j)
    }

    /// Per-example gradients g_a = J_aᵀ ∇_u φ(F(w, z_a); y_a), one row per
    /// example. No 1/n factor: the mean of these rows is the gradient of the
    /// mean loss.
    pub fn per_example_gradients(&self, data: &Dataset, loss: Loss) -> Result<Mat, ModelError> {
        self.check_dataset(data)?;
        let (n, d) = (data.num_examples(), self.num_weights());
        let mut g = Mat::zeros((n, d));
        for i in 0..n {
            let cache = self.forward_cached(data.input(i));
            let u = cache.activations.last().unwrap();
            let r = loss.gradient(u.view(), data.target(i));
            let seed = r.insert_axis(ndarray::Axis(0));
            let row = self.backprop_rows(&cache, &seed);
            g.row_mut(i).assign(&row.row(0));
        }
        Ok(g)
    }

    /// Mean loss Φ(w) = (1/n) Σ_a φ(F(w, z_a); y_a).
    pub fn loss_value(&self, data: &Dataset, loss: Loss) -> Result<f64, ModelError> {
        self.check_dataset(data)?;
        let n = data.num_examples();
        let mut total = 0.0;
        for i in 0..n {
            let mut cache = self.forward_cached(data.input(i));
            let u = cache.activations.pop().expect("nonempty activation stack");
            total += loss.value(u.view(), data.target(i));
        }
        Ok(total / n as f64)
    }

    /// Gradient of the mean loss, ∇Φ(w) = (1/n) Σ_a g_a.
    pub fn loss_gradient(&self, data: &Dataset, loss: Loss) -> Result<Vector, ModelError> {
        let g = self.per_example_gradients(data, loss)?;
        Ok(&g.sum_axis(ndarray::Axis(0)) / g.nrows() as f64)
    }

    /// Exact Hessian-vector product ∇²Φ(w)·v of the mean loss, computed with
    /// the forward-over-reverse R-operator. This is the full Hessian (both
    /// the Gauss-Newton term JᵀHφJ and the output-curvature term Σ_k r_k ∇²F_k),
    /// averaged over examples.
    pub fn loss_hvp(&self, data: &Dataset, loss: Loss, v: &Vector) -> Result<Vector, ModelError> {
        self.check_dataset(data)?;
        if v.len() != self.num_weights() {
            return Err(ModelError::WeightLenMismatch {
                expected: self.num_weights(),
                got: v.len(),
            });
        }
        let n = data.num_examples();
        let mut acc = Vector::zeros(self.num_weights());
        for i in 0..n {
            acc += &self.example_hvp(data.input(i), data.target(i), loss, v);
        }
        Ok(acc / n as f64)
    }

    /// R-operator pass for one example: exact ∇²φ_a(w)·v.
    fn example_hvp(
        &self,
        x: ArrayView1<f64>,
        y: ArrayView1<f64>,
        loss: Loss,
        v: &Vector,
    ) -> Vector {
        match &self.kind {
            Kind::Linear {
                input_dim,
                output_dim,
            } => {
                // F is linear in w, so the Hessian is exactly JᵀHφJ.
                let w = ArrayView2::from_shape(
                    (*output_dim, *input_dim),
                    self.weights.as_slice().expect("contiguous weights"),
                )
                .expect("weight shape");
                let vw = ArrayView2::from_shape(
                    (*output_dim, *input_dim),
                    v.as_slice().expect("contiguous direction"),
                )
                .expect("direction shape");
                let u = w.dot(&x);
                let ru = vw.dot(&x);
                let h = loss.hessian_diag(u.view(), y);
                let rdelta = &h * &ru;
                let mut out = Vector::zeros(v.len());
                for i in 0..*output_dim {
                    for j in 0..*input_dim {
                        out[i * input_dim + j] = rdelta[i] * x[j];
                    }
                }
                out
            }
            Kind::Mlp { layers, activation } => {
                let depth = layers.len() - 1;
                let cache = self.forward_cached(x);
                let vslice = v.as_slice().expect("contiguous direction");

                // R-forward sweep: directional derivatives of every
                // activation along v.
                let mut r_act: Vec<Vector> = Vec::with_capacity(depth + 1);
                let mut r_pre: Vec<Vector> = Vec::with_capacity(depth);
                r_act.push(Vector::zeros(layers[0]));
                for l in 0..depth {
                    let (w, _) = self.layer_views(layers, l);
                    let offset = Model::layer_offset(layers, l);
                    let (rows, cols) = (layers[l + 1], layers[l]);
                    let vw = ArrayView2::from_shape((rows, cols), &vslice[offset..offset + rows * cols])
                        .expect("layer shape");
                    let vb = ArrayView1::from(&vslice[offset + rows * cols..offset + rows * cols + rows]);
                    let rz = vw.dot(&cache.activations[l]) + &w.dot(&r_act[l]) + &vb;
                    let ra = if l + 1 < depth {
                        let z = &cache.preacts[l];
                        Vector::from_shape_fn(rows, |i| activation.deriv(z[i]) * rz[i])
                    } else {
                        rz.clone()
                    };
                    r_pre.push(rz);
                    r_act.push(ra);
                }

                // R-backward sweep.
                let u = cache.activations.last().unwrap();
                let mut delta = loss.gradient(u.view(), y);
                let h = loss.hessian_diag(u.view(), y);
                let mut r_delta = &h * r_act.last().unwrap();
                let mut out = Vector::zeros(v.len());
                for l in (0..depth).rev() {
                    let (w, _) = self.layer_views(layers, l);
                    let offset = Model::layer_offset(layers, l);
                    let (rows, cols) = (layers[l + 1], layers[l]);
                    let vw = ArrayView2::from_shape((rows, cols), &vslice[offset..offset + rows * cols])
                        .expect("layer shape");
                    let a = &cache.activations[l];
                    let ra = &r_act[l];
                    for i in 0..rows {
                        for j in 0..cols {
                            out[offset + i * cols + j] = r_delta[i] * a[j] + delta[i] * ra[j];
                        }
                        out[offset + rows * cols + i] = r_delta[i];
                    }
                    if l > 0 {
                        let z = &cache.preacts[l - 1];
                        let rz = &r_pre[l - 1];
                        let t = w.t().dot(&delta);
                        let rt = vw.t().dot(&delta) + &w.t().dot(&r_delta);
                        delta = Vector::from_shape_fn(cols, |j| activation.deriv(z[j]) * t[j]);
                        r_delta = Vector::from_shape_fn(cols, |j| {
                            activation.second_deriv(z[j]) * rz[j] * t[j]
                                + activation.deriv(z[j]) * rt[j]
                        });
                    }
                }
                out
            }
        }
    }
}
