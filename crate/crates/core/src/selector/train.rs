//! BCE training with AdamW and pairwise accuracy.

use alloc::vec::Vec;

use super::SelectorModel;
use crate::dataset::{BalancedPairSet, PairSample, BIN_COUNT};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cosine decay of the learning rate to zero over all steps.
    pub cosine: bool,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 20,
            cosine: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer hyperparameters out of range"));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range"));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.learning_rate;
        }
        let progress = step as f64 / total as f64;
        self.learning_rate * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}

/// Numerically stable `BCE(sigmoid(logit), label)` and its logit derivative.
pub fn bce_with_logits(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + math::ln(1.0 + math::exp(-logit.abs()));
    (loss, math::logistic(logit) - label)
}

impl SelectorModel {
    /// Mean BCE over `batch`; gradients of the mean are accumulated.
    pub fn accumulate_batch(&mut self, set: &BalancedPairSet, batch: &[PairSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for sample in batch {
            let trace = self.trace_pair(
                set.latent(sample.first),
                set.latent(sample.second),
                set.embedding(sample.prompt),
            )?;
            let logit = trace.mlp_out.last().expect("output")[0];
            let (loss, d_logit) = bce_with_logits(logit, f64::from(sample.label()));
            total += loss;
            self.backward(&trace, d_logit * scale);
        }
        Ok(total * scale)
    }

    /// Mean BCE over `pairs` without touching gradients.
    pub fn mean_loss(&self, set: &BalancedPairSet, pairs: &[PairSample]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("pair list"));
        }
        let mut total = 0.0;
        for sample in pairs {
            let p = self.predict_pair(
                set.latent(sample.first),
                set.latent(sample.second),
                set.embedding(sample.prompt),
            )?;
            total += bce_with_logits(p.logit, f64::from(sample.label())).0;
        }
        Ok(total / pairs.len() as f64)
    }

    fn adamw_step(&mut self, config: &TrainConfig, lr: f64) {
        let t = (self.state.steps + 1) as i32;
        let c1 = 1.0 - libm::pow(config.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(config.beta2, f64::from(t));
        for p in self.params_mut() {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = config.beta1 * p.m[i] + (1.0 - config.beta1) * g;
                p.v[i] = config.beta2 * p.v[i] + (1.0 - config.beta2) * g * g;
                let update = (p.m[i] / c1) / (math::sqrt(p.v[i] / c2) + config.epsilon);
                p.value[i] -= lr * (update + config.weight_decay * p.value[i]);
            }
        }
        self.state.steps += 1;
    }
}

/// Trains on `set.train` and returns the per-epoch mean loss.
pub fn train(model: &mut SelectorModel, set: &BalancedPairSet, config: &TrainConfig) -> Result<Vec<f64>> {
    train_on(model, set, &set.train, config)
}

/// Trains on an explicit pair list.
pub fn train_on(
    model: &mut SelectorModel,
    set: &BalancedPairSet,
    pairs: &[PairSample],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = Rng::new(config.seed);
    let per_epoch = pairs.len().div_ceil(config.batch_size);
    let total_steps = per_epoch * config.epochs;
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| pairs[i]));
            model.zero_grad();
            let loss = model.accumulate_batch(set, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            epoch_loss += loss * batch.len() as f64;
            let lr = config.rate_at(epoch * per_epoch + step, total_steps);
            model.adamw_step(config, lr);
            if !model.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
        }
        history.push(epoch_loss / pairs.len() as f64);
    }
    model.state.loss_history.extend_from_slice(&history);
    Ok(history)
}

/// Correct-direction counts overall and per gap bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    pub bin_correct: [usize; BIN_COUNT],
    pub bin_total: [usize; BIN_COUNT],
}

impl Accuracy {
    pub fn overall(&self) -> f64 {
        ratio(self.correct, self.total)
    }

    /// `NaN` for an empty bin.
    pub fn bin(&self, bin: usize) -> f64 {
        ratio(self.bin_correct[bin], self.bin_total[bin])
    }

    /// Highest bin holding at least `min_count` pairs.
    pub fn top_bin(&self, min_count: usize) -> Option<usize> {
        (0..BIN_COUNT).rev().find(|&b| self.bin_total[b] >= min_count.max(1))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy of an arbitrary first-wins probability. A pair counts as
/// correct when `p > 0.5` agrees with the label.
pub fn pairwise_accuracy_with(
    pairs: &[PairSample],
    mut probability: impl FnMut(&PairSample) -> Result<f64>,
) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for sample in pairs {
        let predicted = probability(sample)? > 0.5;
        let hit = usize::from(predicted == (sample.label() == 1));
        let bin = sample.bin();
        acc.correct += hit;
        acc.total += 1;
        acc.bin_correct[bin] += hit;
        acc.bin_total[bin] += 1;
    }
    Ok(acc)
}

pub fn pairwise_accuracy(model: &SelectorModel, set: &BalancedPairSet, pairs: &[PairSample]) -> Result<Accuracy> {
    pairwise_accuracy_with(pairs, |s| {
        Ok(model
            .predict_pair(set.latent(s.first), set.latent(s.second), set.embedding(s.prompt))?
            .probability)
    })
}
