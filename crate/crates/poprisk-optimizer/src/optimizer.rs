//! The gated adaptive optimizer and its ungated baseline.
//!
//! One step maintains three exponential moving averages over the incoming
//! batch-mean gradients g_t: the first moment m, the second moment v, and a
//! variance track s of squared deviations (g_t − m_{t−1})², measured
//! against the mean estimate from before the step so the deviation is not
//! dragged toward the new sample. After bias correction the gate compares
//! m̂² against α·ŝ per parameter and multiplies the usual adaptive step:
//!
//! w ← w − η q ⊙ m̂/(√v̂ + ε) − η λ_wd w.
//!
//! With every gate forced open (q ≡ 1) the update is exactly AdamW with
//! decoupled weight decay; [`adamw_step`] implements that baseline as its
//! own arithmetic so the two code paths can be checked against each other.

use serde::{Deserialize, Serialize};

use numerics::Vector;

use crate::gate::{diagonal_gate, GateConfig};
use crate::stats::BatchStats;
use crate::PopRiskError;

/// Where the gate's variance input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// The streaming EMA ŝ, bias-corrected. Production default: costs one
    /// extra d-vector of state and nothing else.
    StreamingEma,
    /// The current batch's unbiased diagonal variance (Σ_B)_{kk}/(b−1),
    /// which needs per-example gradients every step. The gated mean stays
    /// m̂ as in the streaming algorithm; only the variance input changes.
    /// Available through [`poprisk_step_with_stats`].
    BatchExact,
}

/// Hyperparameters for [`poprisk_step`] and [`adamw_step`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopRiskConfig {
    /// Step size η.
    pub learning_rate: f64,
    /// First-moment decay β₁.
    pub beta1: f64,
    /// Second-moment decay β₂.
    pub beta2: f64,
    /// Variance-track decay ρ.
    pub rho: f64,
    /// Decoupled weight decay λ_wd.
    pub weight_decay: f64,
    /// Denominator floor ε in the adaptive step.
    pub epsilon: f64,
    /// Gate shape and coefficients.
    pub gate: GateConfig,
    /// Variance source for the gate.
    pub variance_mode: VarianceMode,
    /// When set, a warning is logged once the step count first exceeds one
    /// epoch: replayed examples are no longer fresh draws, so the fresh-batch
    /// coefficient α = 1 starts to understate the leave-one-out correction.
    pub steps_per_epoch: Option<u64>,
}

impl Default for PopRiskConfig {
    fn default() -> Self {
        PopRiskConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.99,
            weight_decay: 0.0,
            epsilon: 1e-8,
            gate: GateConfig::default(),
            variance_mode: VarianceMode::StreamingEma,
            steps_per_epoch: None,
        }
    }
}

impl PopRiskConfig {
    fn validate(&self) -> Result<(), PopRiskError> {
        let in_unit = |x: f64| (0.0..1.0).contains(&x);
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !in_unit(self.rho) {
            return Err(PopRiskError::InvalidConfig(format!(
                "decay rates must lie in [0,1): beta1={}, beta2={}, rho={}",
                self.beta1, self.beta2, self.rho
            )));
        }
        for (name, x) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("epsilon", self.epsilon),
            ("gate.alpha", self.gate.alpha),
            ("gate.lambda_pop", self.gate.lambda_pop),
            ("gate.epsilon", self.gate.epsilon),
        ] {
            if !x.is_finite() || x < 0.0 {
                return Err(PopRiskError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {x}"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable optimizer state: the three moment vectors and the step count.
#[derive(Clone, Debug)]
pub struct PopRiskState {
    config: PopRiskConfig,
    m: Vector,
    v: Vector,
    s: Vector,
    t: u64,
    epoch_warning_emitted: bool,
}

impl PopRiskState {
    /// Fresh state with m = v = s = 0 and t = 0.
    pub fn new(dim: usize, config: PopRiskConfig) -> Result<PopRiskState, PopRiskError> {
        config.validate()?;
        Ok(PopRiskState {
            config,
            m: Vector::zeros(dim),
            v: Vector::zeros(dim),
            s: Vector::zeros(dim),
            t: 0,
            epoch_warning_emitted: false,
        })
    }

    pub fn config(&self) -> &PopRiskConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// First-moment EMA m (not bias-corrected).
    pub fn first_moment(&self) -> &Vector {
        &self.m
    }

    /// Second-moment EMA v (not bias-corrected).
    pub fn second_moment(&self) -> &Vector {
        &self.v
    }

    /// Variance-track EMA s (not bias-corrected).
    pub fn variance_ema(&self) -> &Vector {
        &self.s
    }

    /// Whether the multi-epoch replay warning has been logged. Replayed
    /// batches violate the fresh-draw assumption behind α = 1; the optimizer
    /// keeps running but says so once.
    pub fn epoch_warning_emitted(&self) -> bool {
        self.epoch_warning_emitted
    }
}

/// Per-step gate summary, the source for the training-log columns.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// The gate vector q applied this step.
    pub gate: Vector,
    /// Fraction of parameters with q_k > 1/2 (for the hard gate, exactly the
    /// fraction of open gates).
    pub gate_open_fraction: f64,
    /// Mean of q over parameters.
    pub mean_q: f64,
}

fn summarize_gate(q: Vector) -> StepInfo {
    let d = q.len().max(1) as f64;
    let open = q.iter().filter(|&&x| x > 0.5).count() as f64;
    let mean = q.sum() / d;
    StepInfo {
        gate: q,
        gate_open_fraction: open / d,
        mean_q: mean,
    }
}

/// Shared moment/update core. `exact_variance` substitutes the gate's
/// variance input; `force_open` bypasses the gate entirely (the AdamW
/// equivalence harness).
fn advance(
    state: &mut PopRiskState,
    weights: &mut Vector,
    grad: &Vector,
    exact_variance: Option<&Vector>,
    force_open: bool,
) -> Result<StepInfo, PopRiskError> {
    let d = state.dim();
    if grad.len() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: grad.len(),
        });
    }
    if weights.len() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: weights.len(),
        });
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(PopRiskError::NonFiniteGradient);
    }

    let cfg = state.config.clone();
    state.t += 1;
    let t = state.t;

    // Variance track first, against the pre-update mean estimate.
    let deviation = grad - &state.m;
    state.s = &state.s * cfg.rho + &deviation.map(|x| x * x) * (1.0 - cfg.rho);
    state.m = &state.m * cfg.beta1 + grad * (1.0 - cfg.beta1);
    state.v = &state.v * cfg.beta2 + &grad.map(|x| x * x) * (1.0 - cfg.beta2);

    let m_hat = &state.m / (1.0 - cfg.beta1.powf(t as f64));
    let v_hat = &state.v / (1.0 - cfg.beta2.powf(t as f64));
    let s_hat = &state.s / (1.0 - cfg.rho.powf(t as f64));

    let q = if force_open {
        Vector::ones(d)
    } else {
        let variance = exact_variance.unwrap_or(&s_hat);
        diagonal_gate(&m_hat, variance, &cfg.gate)
    };

    for k in 0..d {
        let step = q[k] * m_hat[k] / (v_hat[k].sqrt() + cfg.epsilon);
        weights[k] -= cfg.learning_rate * (step + cfg.weight_decay * weights[k]);
    }

    if let Some(epoch) = cfg.steps_per_epoch {
        if t > epoch && !state.epoch_warning_emitted {
            state.epoch_warning_emitted = true;
            eprintln!(
                "poprisk-optimizer: step {t} passed one epoch ({epoch} steps); replayed \
                 examples are not fresh draws, so the leave-one-out coefficient alpha=1 \
                 understates the variance correction (consider the finite-population value)"
            );
        }
    }

    Ok(summarize_gate(q))
}

/// One gated step from a batch-mean gradient (Algorithm: variance track
/// against the previous mean, moment EMAs, bias correction, gate, gated
/// adaptive update with decoupled weight decay).
///
/// This entry point only carries the mean gradient, so it requires
/// [`VarianceMode::StreamingEma`]; use [`poprisk_step_with_stats`] for the
/// batch-exact gate.
pub fn poprisk_step(
    state: &mut PopRiskState,
    weights: &mut Vector,
    grad: &Vector,
) -> Result<StepInfo, PopRiskError> {
    if state.config.variance_mode == VarianceMode::BatchExact {
        return Err(PopRiskError::InvalidConfig(
            "variance_mode=batch_exact needs per-example statistics; \
             call poprisk_step_with_stats"
                .to_string(),
        ));
    }
    advance(state, weights, grad, None, false)
}

/// One gated step from full per-batch statistics. Under
/// [`VarianceMode::BatchExact`] the gate reads the unbiased per-batch
/// diagonal variance (Σ_B)_{kk}/(b−1) instead of the streaming ŝ; the
/// moment EMAs update identically either way.
pub fn poprisk_step_with_stats(
    state: &mut PopRiskState,
    weights: &mut Vector,
    stats: &BatchStats,
) -> Result<StepInfo, PopRiskError> {
    let grad = stats.mean().clone();
    match state.config.variance_mode {
        VarianceMode::StreamingEma => advance(state, weights, &grad, None, false),
        VarianceMode::BatchExact => {
            let b = stats.batch_size() as f64;
            let exact = stats.diag_variance() / (b - 1.0);
            advance(state, weights, &grad, Some(&exact), false)
        }
    }
}

/// One AdamW step with decoupled weight decay, written as its own
/// arithmetic rather than delegating to the gated core. Shares the
/// hyperparameters (gate settings are ignored) and the m/v state; the
/// variance track s is left untouched.
pub fn adamw_step(
    state: &mut PopRiskState,
    weights: &mut Vector,
    grad: &Vector,
) -> Result<StepInfo, PopRiskError> {
    let d = state.dim();
    if grad.len() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: grad.len(),
        });
    }
    if weights.len() != d {
        return Err(PopRiskError::DimensionMismatch {
            expected: d,
            got: weights.len(),
        });
    }
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(PopRiskError::NonFiniteGradient);
    }

    let cfg = state.config.clone();
    state.t += 1;
    let t = state.t as f64;
    state.m = &state.m * cfg.beta1 + grad * (1.0 - cfg.beta1);
    state.v = &state.v * cfg.beta2 + &grad.map(|x| x * x) * (1.0 - cfg.beta2);
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for k in 0..d {
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        weights[k] -=
            cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * weights[k]);
    }
    Ok(summarize_gate(Vector::ones(d)))
}

/// One row of a training log; serializes to the CSV column set
/// step, train_loss, val_loss, val_acc, gate_open_fraction, mean_q.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub gate_open_fraction: f64,
    pub mean_q: f64,
}
