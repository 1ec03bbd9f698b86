//! Mini-batch training with Adam, and inference.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use super::loss::total_loss_and_grad;
use super::model::RefinerModel;
use super::nn::Adam;
use super::{split_complex, LearningError, TrainSample};
use crate::imaging::ImageEstimate;
use crate::metrics;
use crate::rng::{seeded, stream_id, substream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Negatives kept per positive in the hard-example loss.
    pub eta: f64,
    /// L1 weight.
    pub alpha: f64,
    /// Initial step size; decays along a half cosine to
    /// `learning_rate · final_lr_fraction`.
    pub learning_rate: f64,
    pub final_lr_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of the dataset held out for model selection.
    pub validation_fraction: f64,
    /// Detection threshold for the validation DR/FDR.
    pub threshold: f64,
    pub seed: u64,
    /// Rotate every training input by a random common phase. Each prior is
    /// equivariant to a common phase on `y` while the label is not affected,
    /// so this only removes a nuisance the network would otherwise memorize.
    pub phase_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 10.0,
            alpha: 1e-4,
            learning_rate: 1e-3,
            final_lr_fraction: 0.01,
            epochs: 50,
            batch_size: 16,
            validation_fraction: 0.1,
            threshold: metrics::DEFAULT_THRESHOLD,
            seed: 0,
            phase_augmentation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        let bad = |m| Err(LearningError::InvalidHyperParameter(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and positive");
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("final_lr_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let lo = self.learning_rate * self.final_lr_fraction;
        let t = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        lo + 0.5 * (self.learning_rate - lo) * (1.0 + libm::cos(core::f64::consts::PI * t))
    }
}

/// Mean loss and metrics over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub mse: f64,
    pub ssim: f64,
    pub dr: f64,
    pub fdr: f64,
    /// Mean `Σ|pred|` per image.
    pub l1_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// `None` when nothing was held out.
    pub validation: Option<Evaluation>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss (or
    /// training loss when nothing is held out).
    pub model: RefinerModel<f32>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

const PHASE_STREAM: u64 = u64::from_be_bytes(*b"\0\0\0phase");

/// Multiplies a `[re..., im...]` vector by `exp(jθ)`.
fn rotate_phase(input: &[f32], theta: f64) -> Vec<f32> {
    let half = input.len() / 2;
    let (re, im) = input.split_at(half);
    let (s, c) = libm::sincos(theta);
    let mut out = vec![0.0f32; input.len()];
    for i in 0..half {
        let (a, b) = (re[i] as f64, im[i] as f64);
        out[i] = (a * c - b * s) as f32;
        out[half + i] = (a * s + b * c) as f32;
    }
    out
}

/// Training/validation split: a seeded shuffle with the last
/// `⌈fraction·n⌉` indices held out (at least one training sample stays).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, u64::MAX));
    let n_val = (libm::ceil(fraction * n as f64) as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Predictions for `inputs`, evaluated in chunks of `batch`.
pub fn predict(model: &RefinerModel<f32>, inputs: &[&[f32]], batch: usize) -> Result<Vec<Vec<f32>>, LearningError> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        out.extend(model.forward(chunk)?);
    }
    Ok(out)
}

/// Loss and metrics of `model` on `samples` under `config`.
pub fn evaluate(
    model: &RefinerModel<f32>,
    samples: &[&TrainSample],
    config: &TrainConfig,
) -> Result<Evaluation, LearningError> {
    if samples.is_empty() {
        return Ok(Evaluation::default());
    }
    let inputs: Vec<&[f32]> = samples.iter().map(|s| s.input.as_slice()).collect();
    let preds = predict(model, &inputs, config.batch_size)?;
    let mut e = Evaluation::default();
    for (p, s) in preds.iter().zip(samples) {
        e.loss += total_loss_and_grad(p, &s.label, config.eta, config.alpha, None)? as f64;
        let pf: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let tf: Vec<f64> = s.label.iter().map(|&v| v as f64).collect();
        let r = metrics::evaluate(&pf, &tf, config.threshold);
        e.mse += r.mse;
        e.ssim += r.ssim;
        e.dr += r.dr;
        e.fdr += r.fdr;
        e.l1_mass += pf.iter().map(|v| v.abs()).sum::<f64>();
    }
    let n = samples.len() as f64;
    e.loss /= n;
    e.mse /= n;
    e.ssim /= n;
    e.dr /= n;
    e.fdr /= n;
    e.l1_mass /= n;
    Ok(e)
}

/// Trains `model` on `dataset`.
///
/// The batch order of every epoch comes from a substream of `config.seed`,
/// so a run is reproducible. `progress` is called after each epoch. A
/// non-finite batch loss aborts with [`LearningError::Diverged`].
pub fn train(
    dataset: &[TrainSample],
    mut model: RefinerModel<f32>,
    config: &TrainConfig,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, LearningError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LearningError::EmptyDataset);
    }
    let label_len = model.config().plane();
    for s in dataset {
        if s.label.len() != label_len {
            return Err(LearningError::ShapeMismatch {
                what: "label",
                expected: label_len,
                got: s.label.len(),
            });
        }
    }
    let (mut train_idx, val_idx) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    let val: Vec<&TrainSample> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt = Adam::<f32>::new(model.n_params());
    let mut grads = vec![0.0f32; model.n_params()];
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, RefinerModel<f32>)> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut substream(config.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut lr = config.learning_rate;
        let mut phase_rng = substream(config.seed, stream_id(&[PHASE_STREAM, epoch as u64]));
        for batch in train_idx.chunks(config.batch_size) {
            let rotated: Vec<Vec<f32>> = if config.phase_augmentation {
                batch
                    .iter()
                    .map(|&i| rotate_phase(&dataset[i].input, phase_rng.random::<f64>() * core::f64::consts::TAU))
                    .collect()
            } else {
                Vec::new()
            };
            let inputs: Vec<&[f32]> = if config.phase_augmentation {
                rotated.iter().map(Vec::as_slice).collect()
            } else {
                batch.iter().map(|&i| dataset[i].input.as_slice()).collect()
            };
            let tape = model.forward_train(&inputs)?;
            let out = tape.output();
            let mut d_out = vec![0.0f32; out.len()];
            let inv_b = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for (j, &i) in batch.iter().enumerate() {
                let range = j * label_len..(j + 1) * label_len;
                let l = total_loss_and_grad(
                    &out[range.clone()],
                    &dataset[i].label,
                    config.eta,
                    config.alpha,
                    Some(&mut d_out[range]),
                )?;
                batch_loss += l as f64;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(LearningError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            for g in &mut d_out {
                *g *= inv_b;
            }
            grads.fill(0.0);
            model.backward(&tape, &d_out, &mut grads)?;
            drop(tape);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(LearningError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            lr = config.lr_at(step, total_steps);
            opt.step(model.params_mut(), &grads, lr);
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let validation = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val, config)?)
        };
        let score = validation.map_or(train_loss, |v| v.loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.clone()));
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            validation,
        };
        progress(&record);
        trace.push(record);
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        trace,
    })
}

/// Refines one prior (`Aᴴy`, an SP image or raw CSI, matching what the
/// model was trained on) into a nonnegative image.
pub fn infer(model: &RefinerModel<f32>, prior: &[Complex64]) -> Result<ImageEstimate, LearningError> {
    let mut input = split_complex(prior);
    let scale = model.input_scale();
    for v in &mut input {
        *v = (*v as f64 / scale) as f32;
    }
    let out = model.forward(&[&input])?.pop().unwrap_or_default();
    Ok(ImageEstimate {
        sigma_hat: out.into_iter().map(|v| Complex64::new(v as f64, 0.0)).collect(),
    })
}

/// Seeded He initialization for `config`.
pub fn init_model(config: super::RefinerConfig, seed: u64) -> Result<RefinerModel<f32>, LearningError> {
    RefinerModel::new(config, &mut seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{ModelInput, RefinerConfig};
    use rand::Rng;
    use std::vec::Vec;

    fn small_config() -> RefinerConfig {
        RefinerConfig {
            block_widths: vec![8, 8],
            stem_width: 8,
            ..RefinerConfig::new(5, 5)
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<TrainSample> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let mut label = vec![0.0f32; 25];
                let k = rng.random_range(1..=2);
                for _ in 0..k {
                    label[rng.random_range(0..25)] = 0.1 + 0.1 * rng.random::<f32>();
                }
                let mut input: Vec<f32> = (0..50).map(|_| 0.05 * (rng.random::<f32>() - 0.5)).collect();
                for (x, v) in input.iter_mut().zip(&label) {
                    *x += v * 5.0;
                }
                let k = label.iter().filter(|v| **v != 0.0).count();
                TrainSample { input, label, k }
            })
            .collect()
    }

    #[test]
    fn memorizes_small_set() {
        let data = toy_samples(10, 1);
        let config = TrainConfig {
            epochs: 300,
            batch_size: 10,
            validation_fraction: 0.0,
            alpha: 0.0,
            eta: 1e6,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let model = init_model(small_config(), 3).unwrap();
        let out = train(&data, model, &config, &mut |_| {}).unwrap();
        let last = out.trace.last().unwrap().train_loss;
        assert!(last < 1e-3, "final training loss {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy_samples(12, 2);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let model = init_model(small_config(), 5).unwrap();
            train(&data, model, &config, &mut |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
        assert!(a.trace[0].validation.is_some());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = toy_samples(4, 3);
        data[0].input[0] = f32::NAN;
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let model = init_model(small_config(), 5).unwrap();
        assert!(matches!(
            train(&data, model, &config, &mut |_| {}),
            Err(LearningError::Diverged { .. })
        ));
    }

    #[test]
    fn rejects_bad_configs_and_empty_data() {
        let model = init_model(small_config(), 5).unwrap();
        assert!(matches!(
            train(&[], model.clone(), &TrainConfig::default(), &mut |_| {}),
            Err(LearningError::EmptyDataset)
        ));
        for bad in [
            TrainConfig {
                eta: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                alpha: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&toy_samples(2, 0), model.clone(), &bad, &mut |_| {}).is_err());
        }
    }

    #[test]
    fn inference_is_deterministic_and_checks_shape() {
        let mut model = init_model(small_config(), 9).unwrap();
        model.set_input_scale(2.0);
        let prior: Vec<Complex64> = (0..25).map(|i| Complex64::new(i as f64 * 0.1, -0.05)).collect();
        let a = infer(&model, &prior).unwrap();
        let b = infer(&model, &prior).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sigma_hat.len(), 25);
        assert!(a.sigma_hat.iter().all(|z| z.re >= 0.0 && z.im == 0.0));
        assert!(infer(&model, &prior[..20]).is_err());
        model.zero_head();
        assert!(infer(&model, &prior).unwrap().magnitude().iter().all(|v| *v == 0.0));
        let _ = ModelInput::Image { channels: 2 };
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(50, 0.1, 4);
        assert_eq!((t.len(), v.len()), (45, 5));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.1, 4), (t, v));
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }

    #[test]
    fn phase_rotation_is_invertible_and_keeps_magnitude() {
        let x = [0.3f32, -1.0, 0.0, 2.0, 0.5, -0.25];
        let y = rotate_phase(&x, 1.1);
        let back = rotate_phase(&y, -1.1);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
        for i in 0..3 {
            let m0 = x[i].hypot(x[i + 3]);
            let m1 = y[i].hypot(y[i + 3]);
            assert!((m0 - m1).abs() < 1e-6);
        }
        assert_eq!(rotate_phase(&x, 0.0), x);
    }

    #[test]
    fn augmented_training_is_reproducible() {
        let data = toy_samples(12, 4);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            phase_augmentation: true,
            ..TrainConfig::default()
        };
        let run = || train(&data, init_model(small_config(), 3).unwrap(), &config, &mut |_| {}).unwrap();
        assert_eq!(run().model.params(), run().model.params());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0, 100) - 1e-3).abs() < 1e-15);
        assert!((c.lr_at(99, 100) - 1e-5).abs() < 1e-15);
    }
}
