//! Online hard-example-mining loss with an L1 sparsity penalty.
//!
//! Positives are pixels with a nonzero label; every positive contributes its
//! squared error. Among zero-label pixels only the `⌈ηK⌉` largest squared
//! errors are kept (ties go to the lower index). The sum is divided by the
//! number of contributing pixels. When a label has no positives the loss
//! falls back to the `⌈η⌉` hardest negatives.

use alloc::vec::Vec;

use num_traits::Float;

use super::LearningError;

fn negative_budget(eta: f64, k: usize, n_negatives: usize) -> usize {
    let raw = if k == 0 { eta } else { eta * k as f64 };
    (libm::ceil(raw).max(0.0) as usize).min(n_negatives)
}

/// Pixels that enter the loss, and the normalizer.
struct Selection {
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn select<T: Float>(pred: &[T], label: &[T], eta: f64) -> Result<Selection, LearningError> {
    if pred.len() != label.len() {
        return Err(LearningError::ShapeMismatch {
            what: "prediction",
            expected: label.len(),
            got: pred.len(),
        });
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(LearningError::InvalidHyperParameter("eta must be finite and positive"));
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (i, l) in label.iter().enumerate() {
        if *l != T::zero() {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    let budget = negative_budget(eta, positives.len(), negatives.len());
    let err = |i: usize| {
        let d = pred[i] - label[i];
        d * d
    };
    let order = |a: &usize, b: &usize| {
        err(*b)
            .partial_cmp(&err(*a))
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if budget < negatives.len() {
        if budget > 0 {
            negatives.select_nth_unstable_by(budget - 1, order);
        }
        negatives.truncate(budget);
    }
    Ok(Selection {
        positives,
        negatives,
    })
}

/// OHEM loss `(L_pos + L_neg) / (N_pos + N_neg)` for one image.
pub fn ohem_loss<T: Float>(pred: &[T], label: &[T], eta: f64) -> Result<T, LearningError> {
    ohem_loss_and_grad(pred, label, eta, None)
}

/// OHEM loss; when `grad` is given, `∂L/∂pred` is written into it.
pub fn ohem_loss_and_grad<T: Float>(
    pred: &[T],
    label: &[T],
    eta: f64,
    grad: Option<&mut [T]>,
) -> Result<T, LearningError> {
    let sel = select(pred, label, eta)?;
    let count = sel.positives.len() + sel.negatives.len();
    let mut total = T::zero();
    for &i in sel.positives.iter().chain(&sel.negatives) {
        let d = pred[i] - label[i];
        total = total + d * d;
    }
    let loss = if count == 0 {
        T::zero()
    } else {
        total / T::from(count).unwrap()
    };
    if let Some(g) = grad {
        for x in g.iter_mut() {
            *x = T::zero();
        }
        if count > 0 {
            let scale = T::from(2.0).unwrap() / T::from(count).unwrap();
            for &i in sel.positives.iter().chain(&sel.negatives) {
                g[i] = scale * (pred[i] - label[i]);
            }
        }
    }
    Ok(loss)
}

/// `ohem_loss + α·Σ|pred|`.
pub fn total_loss<T: Float>(pred: &[T], label: &[T], eta: f64, alpha: f64) -> Result<T, LearningError> {
    total_loss_and_grad(pred, label, eta, alpha, None)
}

/// [`total_loss`] with an optional gradient output. The L1 subgradient at 0
/// is taken as 0.
pub fn total_loss_and_grad<T: Float>(
    pred: &[T],
    label: &[T],
    eta: f64,
    alpha: f64,
    grad: Option<&mut [T]>,
) -> Result<T, LearningError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(LearningError::InvalidHyperParameter("alpha must be finite and non-negative"));
    }
    let a = T::from(alpha).unwrap();
    let l1 = pred.iter().fold(T::zero(), |acc, p| acc + p.abs());
    match grad {
        Some(g) => {
            let base = ohem_loss_and_grad(pred, label, eta, Some(&mut *g))?;
            for (gi, p) in g.iter_mut().zip(pred) {
                if *p > T::zero() {
                    *gi = *gi + a;
                } else if *p < T::zero() {
                    *gi = *gi - a;
                }
            }
            Ok(base + a * l1)
        }
        None => Ok(ohem_loss(pred, label, eta)? + a * l1),
    }
}
