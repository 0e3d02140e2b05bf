//! The training loop and evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{LayerUsageStats, UsageAccumulator};
use crate::data::{batches, sequential_batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optim::{cosine_lr, cross_entropy, AdamW};

/// Stream id for the gate-noise generator, kept apart from the shuffles.
const NOISE_STREAM: u64 = 0x6e_6f69_7365;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Required in config files; there is deliberately no default.
    pub seed: u64,
    /// Cap on training samples (the first `n` of the training split).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_size: Option<usize>,
}

mod defaults {
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        256
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: defaults::lr(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            weight_decay: defaults::weight_decay(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            seed: 0,
            subset_size: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", format!("{} must be positive", self.lr)));
        }
        for (field, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, format!("{b} not in (0, 1)")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.subset_size == Some(0) {
            return Err(Error::config("train.subset_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction in `[0, 1]`, measured on the held-out (test) split.
    pub val_accuracy: f64,
    pub per_layer_usage: Vec<LayerUsageStats>,
    /// Omitted in reproducible mode so the stream is byte-stable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub usage: Vec<LayerUsageStats>,
    pub correct: usize,
    pub total: usize,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss, accuracy and routing usage with gate noise off.
pub fn evaluate(model: &Model, split: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Domain(format!("evaluation split `{}` is empty", split.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut usage = UsageAccumulator::new(&model.expert_counts());
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for batch in sequential_batches(split, batch_size) {
        let pass = model.forward(&batch.inputs, false, &mut rng)?;
        let logits = pass.tape.value(pass.logits);
        loss_sum += cross_entropy(logits, &batch.labels)? * batch.labels.len() as f64;
        correct += (0..batch.labels.len())
            .filter(|&r| argmax(logits.row(r)) == batch.labels[r])
            .count();
        usage.record(&pass.selections)?;
    }
    let total = split.len();
    Ok(Evaluation {
        loss: loss_sum / total as f64,
        accuracy: correct as f64 / total as f64,
        usage: usage.stats()?,
        correct,
        total,
    })
}

/// Options that do not affect the numbers a run produces.
#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions {
    /// Record wall-clock seconds per epoch.
    pub timing: bool,
}

/// Trains `model` in place and returns one record per epoch.
pub fn fit(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    fit_with(model, train, val, cfg, FitOptions::default(), |_| Ok(()))
}

/// [`fit`] with a callback invoked after each epoch, e.g. to stream
/// metrics to disk as they arrive.
pub fn fit_with<F>(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    opts: FitOptions,
    mut on_epoch: F,
) -> Result<Vec<EpochMetrics>>
where
    F: FnMut(&EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Domain(format!("training split `{}` is empty", train.name)));
    }
    let subset;
    let train = match cfg.subset_size {
        Some(n) if n < train.len() => {
            subset = train.take(n);
            &subset
        }
        _ => train,
    };

    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut loss_sum = 0.0;
        for (b, batch) in batches(train, cfg.batch_size, cfg.seed, epoch as u64).enumerate() {
            let out = model.loss_and_grads(&batch.inputs, &batch.labels, true, &mut noise_rng)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                    lr,
                    detail: format!("loss is {}", out.loss),
                });
            }
            opt.step(model.params_mut(), &out.grads, lr).map_err(|e| Error::Diverged {
                epoch: epoch + 1,
                batch: b + 1,
                lr,
                detail: e.to_string(),
            })?;
            loss_sum += out.loss * batch.labels.len() as f64;
        }
        let eval = evaluate(model, val, cfg.batch_size)?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.accuracy,
            per_layer_usage: eval.usage,
            wall_seconds: opts.timing.then(|| start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE)),
        };
        on_epoch(&metrics)?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{ModelConfig, SizePreset};
    use crate::schedules::ScheduleKind;
    use crate::tensor::Array;

    fn tiny(dim: usize, classes: usize) -> Model {
        let cfg = ModelConfig::new(SizePreset::Tiny, ScheduleKind::Descending, 4, 1, dim, classes);
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let ds = make_synthetic(64, 8, 4, 3).unwrap();
        let mut model = tiny(8, 4);
        let before = evaluate(&model, &ds, 64).unwrap().loss;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-2,
            seed: 5,
            ..TrainConfig::default()
        };
        let hist = fit(&mut model, &ds, &ds, &cfg).unwrap();
        assert_eq!(hist.len(), 1);
        let after = evaluate(&model, &ds, 64).unwrap().loss;
        assert!(after < before, "{before} -> {after}");
        assert_eq!(hist[0].val_loss, after);
        assert!(hist[0].wall_seconds.is_none());
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = make_synthetic(48, 6, 3, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut a = tiny(6, 3);
        let mut b = tiny(6, 3);
        let ha = fit(&mut a, &ds, &ds, &cfg).unwrap();
        let hb = fit(&mut b, &ds, &ds, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_is_noise_free_and_consistent() {
        let ds = make_synthetic(40, 6, 3, 2).unwrap();
        let mut model = tiny(6, 3);
        let a = evaluate(&model, &ds, 7).unwrap();
        let mut routing = model.config.routing;
        routing.noise_sigma = 5.0;
        model.set_routing(routing);
        let b = evaluate(&model, &ds, 7).unwrap();
        assert_eq!(a, b);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model.logits(&ds.inputs, false, &mut rng).unwrap();
        let offline = cross_entropy(&logits, &ds.labels).unwrap();
        assert!((offline - a.loss).abs() < 1e-10);

        let empty = Dataset::new(Array::zeros(&[0, 6]), vec![], 3, "empty").unwrap();
        assert!(evaluate(&model, &empty, 4).is_err());
    }

    #[test]
    fn uniform_logits_are_at_chance() {
        // A zeroed head makes every logit equal; argmax then always says 0,
        // which is right for exactly one class in ten.
        let ds = make_synthetic(1000, 10, 10, 8).unwrap();
        let mut model = tiny(10, 10);
        model.head.weight = Array::zeros(model.head.weight.shape());
        let ev = evaluate(&model, &ds, 128).unwrap();
        assert!((ev.accuracy - 0.1).abs() <= 0.03, "{}", ev.accuracy);
        assert!((ev.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = make_synthetic(32, 6, 3, 1).unwrap();
        let mut model = tiny(6, 3);
        model.input.bias.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err = fit(&mut model, &ds, &ds, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, batch: 1, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("train.beta2"));
    }
}
