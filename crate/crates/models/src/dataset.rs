//! Datasets and the synthetic generators behind the experiment suite.
//!
//! Generation is bitwise deterministic per seed: every generator draws from
//! a ChaCha stream in a fixed order, so the same (spec, seed) pair always
//! reproduces the same bytes.

use ndarray::ArrayView1;
use numerics::{seeded_rng, Mat, Vector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Provenance of a dataset, embedded in artifacts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
}

/// A fixed set of (input, target) pairs with an optional per-example noise
/// record. When noise is recorded, `targets − noise` recovers the clean
/// targets, which the denoising experiment scores against.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Mat,
    targets: Mat,
    noise: Option<Mat>,
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    noise: Option<Vec<Vec<f64>>>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        inputs: Mat,
        targets: Mat,
        noise: Option<Mat>,
        meta: DatasetMeta,
    ) -> Result<Dataset, ModelError> {
        if inputs.nrows() == 0 {
            return Err(ModelError::EmptyDataset);
        }
        if targets.nrows() != inputs.nrows() {
            return Err(ModelError::TargetLenMismatch {
                expected: inputs.nrows(),
                got: targets.nrows(),
            });
        }
        if let Some(eps) = &noise {
            if eps.nrows() != inputs.nrows() || eps.ncols() != targets.ncols() {
                return Err(ModelError::NoiseLenMismatch {
                    expected: inputs.nrows(),
                    got: eps.nrows(),
                });
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            noise,
            meta,
        })
    }

    pub fn num_examples(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn targets(&self) -> &Mat {
        &self.targets
    }

    pub fn noise(&self) -> Option<&Mat> {
        self.noise.as_ref()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> ArrayView1<'_, f64> {
        self.targets.row(i)
    }

    /// Targets stacked into a single np-vector, matching stacked outputs.
    pub fn targets_flat(&self) -> Vector {
        Vector::from_iter(self.targets.iter().cloned())
    }

    /// Clean targets (targets − noise) when a noise record exists, otherwise
    /// the targets themselves.
    pub fn clean_targets(&self) -> Mat {
        match &self.noise {
            Some(eps) => &self.targets - eps,
            None => self.targets.clone(),
        }
    }

    /// Flat noise record (zeros when none was recorded).
    pub fn noise_flat(&self) -> Vector {
        match &self.noise {
            Some(eps) => Vector::from_iter(eps.iter().cloned()),
            None => Vector::zeros(self.num_examples() * self.output_dim()),
        }
    }

    /// New dataset containing the chosen examples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let take = |m: &Mat| {
            let mut out = Mat::zeros((indices.len(), m.ncols()));
            for (r, &i) in indices.iter().enumerate() {
                out.row_mut(r).assign(&m.row(i));
            }
            out
        };
        Ok(Dataset {
            inputs: take(&self.inputs),
            targets: take(&self.targets),
            noise: self.noise.as_ref().map(take),
            meta: self.meta.clone(),
        })
    }

    /// Replace example i by a new (input, target) pair; the noise record for
    /// that row, if any, is zeroed since the new pair's noise is unknown.
    pub fn replace_example(
        &self,
        i: usize,
        input: ArrayView1<f64>,
        target: ArrayView1<f64>,
    ) -> Result<Dataset, ModelError> {
        if input.len() != self.input_dim() {
            return Err(ModelError::InputDimMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        if target.len() != self.output_dim() {
            return Err(ModelError::OutputDimMismatch {
                expected: self.output_dim(),
                got: target.len(),
            });
        }
        let mut out = self.clone();
        out.inputs.row_mut(i).assign(&input);
        out.targets.row_mut(i).assign(&target);
        if let Some(eps) = &mut out.noise {
            eps.row_mut(i).fill(0.0);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let rows = |m: &Mat| m.rows().into_iter().map(|r| r.to_vec()).collect();
        let doc = DatasetJson {
            inputs: rows(&self.inputs),
            targets: rows(&self.targets),
            noise: self.noise.as_ref().map(rows),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("dataset serialization")
    }

    pub fn from_json(s: &str) -> Result<Dataset, ModelError> {
        let doc: DatasetJson = serde_json::from_str(s)?;
        let to_mat = |rows: &[Vec<f64>]| -> Result<Mat, ModelError> {
            let n = rows.len();
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != cols) {
                return Err(ModelError::InvalidGenerator(
                    "ragged rows in dataset JSON".into(),
                ));
            }
            Ok(Mat::from_shape_fn((n, cols), |(i, j)| rows[i][j]))
        };
        Dataset::new(
            to_mat(&doc.inputs)?,
            to_mat(&doc.targets)?,
            doc.noise.as_deref().map(to_mat).transpose()?,
            doc.meta,
        )
    }
}

/// Binary operation for the modular-arithmetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModularOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ModularOp {
    fn name(self) -> &'static str {
        match self {
            ModularOp::Add => "add",
            ModularOp::Sub => "sub",
            ModularOp::Mul => "mul",
            ModularOp::Div => "div",
        }
    }

    fn apply(self, a: usize, b: usize, p: usize) -> usize {
        match self {
            ModularOp::Add => (a + b) % p,
            ModularOp::Sub => (a + p - b) % p,
            ModularOp::Mul => (a * b) % p,
            // b ≠ 0 guaranteed by pair enumeration; p prime checked upstream,
            // so b^(p−2) is the inverse by Fermat.
            ModularOp::Div => (a * mod_pow(b, p - 2, p)) % p,
        }
    }
}

/// Synthetic dataset generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// Gaussian inputs, noise-free linear teacher.
    LinearGaussian {
        num_examples: usize,
        input_dim: usize,
        output_dim: usize,
    },
    /// Gaussian inputs, linear teacher plus recorded Gaussian label noise.
    NoisyTeacher {
        num_examples: usize,
        input_dim: usize,
        output_dim: usize,
        noise_std: f64,
    },
    /// All pairs (a, b) over Z_p with one-hot inputs and one-hot result
    /// targets; returns the train split of the given fraction.
    ModularArithmetic {
        modulus: usize,
        op: ModularOp,
        train_fraction: f64,
    },
    /// Uniform grid on [−1, 1], targets sin(2πx) plus recorded noise.
    NoisyFunction1d { num_examples: usize, noise_std: f64 },
}

/// Deterministic dataset from a generator spec and seed. For the modular task
/// this is the train split; use [`make_modular_split`] to also get the
/// held-out pairs.
pub fn make_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Dataset, ModelError> {
    match spec {
        GeneratorSpec::LinearGaussian {
            num_examples,
            input_dim,
            output_dim,
        } => teacher_dataset(*num_examples, *input_dim, *output_dim, None, seed),
        GeneratorSpec::NoisyTeacher {
            num_examples,
            input_dim,
            output_dim,
            noise_std,
        } => teacher_dataset(
            *num_examples,
            *input_dim,
            *output_dim,
            Some(*noise_std),
            seed,
        ),
        GeneratorSpec::ModularArithmetic {
            modulus,
            op,
            train_fraction,
        } => Ok(make_modular_split(*modulus, *op, *train_fraction, seed)?.0),
        GeneratorSpec::NoisyFunction1d {
            num_examples,
            noise_std,
        } => function_1d_dataset(*num_examples, *noise_std, seed),
    }
}

fn teacher_dataset(
    n: usize,
    input_dim: usize,
    output_dim: usize,
    noise_std: Option<f64>,
    seed: u64,
) -> Result<Dataset, ModelError> {
    if n == 0 || input_dim == 0 || output_dim == 0 {
        return Err(ModelError::InvalidGenerator(
            "teacher datasets need n, input_dim, output_dim ≥ 1".into(),
        ));
    }
    if let Some(std) = noise_std {
        if !(std >= 0.0) {
            return Err(ModelError::InvalidGenerator(format!(
                "noise_std must be ≥ 0, got {std}"
            )));
        }
    }
    let mut rng = seeded_rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("finite std");
    // Draw order is fixed: inputs, then teacher, then noise.
    let inputs = Mat::from_shape_fn((n, input_dim), |_| unit.sample(&mut rng));
    let teacher_std = 1.0 / (input_dim as f64).sqrt();
    let teacher = Mat::from_shape_fn((input_dim, output_dim), |_| {
        teacher_std * unit.sample(&mut rng)
    });
    let clean = inputs.dot(&teacher);
    let (targets, noise) = match noise_std {
        None => (clean, None),
        Some(std) => {
            // σ = 0 keeps an explicit all-zero record rather than sampling.
            let eps = if std == 0.0 {
                Mat::zeros((n, output_dim))
            } else {
                Mat::from_shape_fn((n, output_dim), |_| std * unit.sample(&mut rng))
            };
            (&clean + &eps, Some(eps))
        }
    };
    let generator = match noise_std {
        None => format!("linear-gaussian(n={n}, d={input_dim}, p={output_dim})"),
        Some(std) => {
            format!("noisy-teacher(n={n}, d={input_dim}, p={output_dim}, sigma={std})")
        }
    };
    Dataset::new(inputs, targets, noise, DatasetMeta { generator, seed })
}

fn function_1d_dataset(n: usize, noise_std: f64, seed: u64) -> Result<Dataset, ModelError> {
    if n < 2 {
        return Err(ModelError::InvalidGenerator(
            "noisy-function-1d needs at least 2 grid points".into(),
        ));
    }
    if !(noise_std >= 0.0) {
        return Err(ModelError::InvalidGenerator(format!(
            "noise_std must be ≥ 0, got {noise_std}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("finite std");
    let inputs = Mat::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let clean = inputs.mapv(|x| (2.0 * std::f64::consts::PI * x).sin());
    let eps = if noise_std == 0.0 {
        Mat::zeros((n, 1))
    } else {
        Mat::from_shape_fn((n, 1), |_| noise_std * unit.sample(&mut rng))
    };
    Dataset::new(
        inputs,
        &clean + &eps,
        Some(eps),
        DatasetMeta {
            generator: format!("noisy-function-1d(n={n}, sigma={noise_std})"),
            seed,
        },
    )
}

/// Train/test split of the modular-arithmetic task: enumerate every pair,
/// shuffle with the seed, and round the train fraction to a pair count
/// (half away from zero). Division requires a prime modulus and skips b = 0.
pub fn make_modular_split(
    modulus: usize,
    op: ModularOp,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), ModelError> {
    if modulus < 2 {
        return Err(ModelError::InvalidGenerator(format!(
            "modulus must be ≥ 2, got {modulus}"
        )));
    }
    if op == ModularOp::Div && !is_prime(modulus) {
        return Err(ModelError::InvalidGenerator(format!(
            "division needs a prime modulus, got {modulus}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(ModelError::InvalidGenerator(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let p = modulus;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for a in 0..p {
        let b_start = if op == ModularOp::Div { 1 } else { 0 };
        for b in b_start..p {
            pairs.push((a, b));
        }
    }
    let total = pairs.len();
    let mut rng = seeded_rng(seed);
    pairs.shuffle(&mut rng);
    let train_count = (train_fraction * total as f64).round() as usize;
    let train_count = train_count.clamp(1, total);
    if train_count == total && train_fraction < 1.0 {
        return Err(ModelError::InvalidGenerator(format!(
            "train_fraction {train_fraction} leaves no held-out pairs for modulus {modulus}"
        )));
    }

    let encode = |subset: &[(usize, usize)]| -> (Mat, Mat) {
        let mut inputs = Mat::zeros((subset.len(), 2 * p));
        let mut targets = Mat::zeros((subset.len(), p));
        for (r, &(a, b)) in subset.iter().enumerate() {
            inputs[(r, a)] = 1.0;
            inputs[(r, p + b)] = 1.0;
            targets[(r, op.apply(a, b, p))] = 1.0;
        }
        (inputs, targets)
    };

    let generator = format!(
        "modular-arithmetic(p={p}, op={}, fraction={train_fraction})",
        op.name()
    );
    let (train_x, train_y) = encode(&pairs[..train_count]);
    let train = Dataset::new(
        train_x,
        train_y,
        None,
        DatasetMeta {
            generator: generator.clone(),
            seed,
        },
    )?;
    let test = if train_count == total {
        // Degenerate full-train split: reuse the train pairs as "held out"
        // so callers always get a non-empty evaluation set.
        train.clone()
    } else {
        let (test_x, test_y) = encode(&pairs[train_count..]);
        Dataset::new(test_x, test_y, None, DatasetMeta { generator, seed })?
    };
    Ok((train, test))
}

fn mod_pow(mut base: usize, mut exp: usize, p: usize) -> usize {
    let mut acc = 1usize;
    base %= p;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % p;
        }
        base = base * base % p;
        exp >>= 1;
    }
    acc
}

fn is_prime(n: usize) -> bool {
    if n < 2 {
        return false;
    }
    let mut k = 2;
    while k * k <= n {
        if n % k == 0 {
            return false;
        }
        k += 1;
    }
    true
}
