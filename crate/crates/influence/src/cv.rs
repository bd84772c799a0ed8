//! Leave-k-out and K-fold risk by explicit retraining.
//!
//! The leave-k-out risk averages, over every size-k holdout I, the mean
//! held-out loss of a model retrained on the complement (whose mean loss is
//! automatically renormalized to the n−k survivors). [`cv_risk`] computes
//! that defining average by full enumeration; [`cv_risk_kfold`] is the
//! usual cheaper estimate over one fixed partition. Enumeration is what
//! makes the first variation common across k (a fixed partition's
//! first-order term keeps a partition-dependent residue), so the
//! size-independence checks use [`cv_risk`].

use itertools::Itertools;
use models::{Dataset, Loss, Model};

use crate::InfluenceError;

/// Largest number of holdout subsets [`cv_risk`] will enumerate; each
/// subset costs one full retraining.
pub const CV_ENUMERATION_CAP: u128 = 4000;

/// Desk-scale bound on the number of examples for retraining-based CV.
const CV_MAX_EXAMPLES: usize = 24;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc * (n - j) as u128 / (j + 1) as u128;
        if acc > CV_ENUMERATION_CAP {
            return acc;
        }
    }
    acc
}

fn held_out_loss(
    model: &Model,
    data: &Dataset,
    psi: Loss,
    holdout: &[usize],
) -> Result<f64, InfluenceError> {
    let mut acc = 0.0;
    for &i in holdout {
        let u = model.forward_one(data.input(i))?;
        acc += psi.value(u.view(), data.target(i));
    }
    Ok(acc / holdout.len() as f64)
}

/// Leave-k-out risk over all C(n, k) holdouts: retrain on each complement,
/// average the held-out loss. The learner must be a deterministic function
/// of its training set for the result to be reproducible.
pub fn cv_risk<F>(
    mut learner: F,
    data: &Dataset,
    psi: Loss,
    k: usize,
) -> Result<f64, InfluenceError>
where
    F: FnMut(&Dataset) -> Result<Model, InfluenceError>,
{
    let n = data.num_examples();
    if n > CV_MAX_EXAMPLES {
        return Err(InfluenceError::TooManyExamples { n, cap: CV_MAX_EXAMPLES });
    }
    if k < 1 || k >= n {
        return Err(InfluenceError::InvalidHoldout { n, k });
    }
    let subsets = binomial(n, k);
    if subsets > CV_ENUMERATION_CAP {
        return Err(InfluenceError::EnumerationTooLarge { subsets, cap: CV_ENUMERATION_CAP });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for holdout in (0..n).combinations(k) {
        let keep: Vec<usize> = (0..n).filter(|i| !holdout.contains(i)).collect();
        let model = learner(&data.subset(&keep)?)?;
        acc += held_out_loss(&model, data, psi, &holdout)?;
        count += 1;
    }
    Ok(acc / count as f64)
}

/// K-fold risk over one fixed partition into contiguous equal folds.
/// Requires 2 ≤ folds ≤ n and folds | n.
pub fn cv_risk_kfold<F>(
    mut learner: F,
    data: &Dataset,
    psi: Loss,
    folds: usize,
) -> Result<f64, InfluenceError>
where
    F: FnMut(&Dataset) -> Result<Model, InfluenceError>,
{
    let n = data.num_examples();
    if n > CV_MAX_EXAMPLES {
        return Err(InfluenceError::TooManyExamples { n, cap: CV_MAX_EXAMPLES });
    }
    if folds < 2 || folds > n || n % folds != 0 {
        return Err(InfluenceError::InvalidHoldout { n, k: folds });
    }
    let fold_size = n / folds;
    let mut acc = 0.0;
    for f in 0..folds {
        let holdout: Vec<usize> = (f * fold_size..(f + 1) * fold_size).collect();
        let keep: Vec<usize> = (0..n).filter(|i| !holdout.contains(i)).collect();
        let model = learner(&data.subset(&keep)?)?;
        acc += held_out_loss(&model, data, psi, &holdout)?;
    }
    Ok(acc / folds as f64)
}
