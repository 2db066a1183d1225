//! Optimization loop: frame-budget batching, Adam, periodic validation and
//! best-checkpoint retention.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::evaluation::{bce_metric, pearson, pooled, predict};
use crate::model::{Gradients, ModelConfig, ProminenceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub max_steps: u64,
    pub validate_every: u64,
    pub max_frames_per_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            max_steps: 6000,
            validate_every: 100,
            max_frames_per_batch: 75_000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.epsilon > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.validate_every == 0 || self.max_steps % self.validate_every != 0 {
            return Err(Error::Config(format!(
                "validate_every ({}) must be positive and divide max_steps ({})",
                self.validate_every, self.max_steps
            )));
        }
        if self.max_frames_per_batch == 0 {
            return Err(Error::Config("max_frames_per_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Packs items greedily in the given order: a batch is closed when the next
/// item would push its frame total past `max_frames`.
pub fn pack_batches(frame_counts: &[usize], order: &[usize], max_frames: usize) -> Result<Vec<Vec<usize>>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut total = 0;
    for &i in order {
        let frames = frame_counts[i];
        if frames > max_frames {
            return Err(Error::Batch(format!(
                "item {i} has {frames} frames, above the batch limit of {max_frames}"
            )));
        }
        if total + frames > max_frames && !current.is_empty() {
            batches.push(std::mem::take(&mut current));
            total = 0;
        }
        current.push(i);
        total += frames;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Shuffles item indices with `seed` and packs them into batches of at most
/// `max_frames` frames.
pub fn make_batches(frame_counts: &[usize], max_frames: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..frame_counts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pack_batches(frame_counts, &order, max_frames)
}

pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &ProminenceModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, model: &mut ProminenceModel, gradients: &Gradients) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        let grads = gradients.slices();
        for (((params, grad), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..params.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

/// Mean loss over all loss elements of a batch and its gradient. Utterances
/// are processed unpadded, so each contributes in proportion to its element
/// count.
pub fn batch_loss_and_gradients(model: &ProminenceModel, batch: &[&Example]) -> Result<(f64, Gradients)> {
    let outputs: Vec<_> = batch
        .par_iter()
        .map(|example| {
            let targets = example
                .targets
                .as_ref()
                .ok_or_else(|| Error::Training(format!("`{}` has no targets", example.id)))?;
            model.loss_and_gradients(example.mel.mapv(f64::from).view(), &example.spans, targets, false)
        })
        .collect::<Result<_>>()?;
    let mut gradients = Gradients::zeros_like(model);
    let (mut loss, mut count) = (0.0, 0usize);
    for output in &outputs {
        loss += output.loss_sum;
        count += output.count;
        gradients.add_assign(&output.gradients);
    }
    let count = count.max(1) as f64;
    gradients.scale(1.0 / count);
    Ok((loss / count, gradients))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous validation.
    pub train_loss: f64,
    /// `None` when the correlation is undefined (constant predictions).
    pub valid_pearson: Option<f64>,
    pub valid_bce: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    /// First validation step reaching `fraction` of the best validation Pearson.
    pub fn convergence_step(&self, fraction: f64) -> Option<u64> {
        let best = self.best.validation_pearson?;
        self.log
            .iter()
            .find(|r| r.valid_pearson.is_some_and(|p| p >= fraction * best))
            .map(|r| r.step)
    }
}

/// Validation Pearson and BCE pooled over all words.
pub fn validate(model: &ProminenceModel, examples: &[Example]) -> Result<(Option<f64>, f64)> {
    let predictions = predict(model, examples)?;
    let (pred, target, _) = pooled(&predictions, examples);
    let correlation = match pearson(&pred, &target) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((correlation, bce_metric(&pred, &target)?))
}

/// Trains a freshly initialized model and returns the checkpoint with the
/// highest validation Pearson together with the validation log.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[Example],
    valid_set: &[Example],
    feature_config_hash: &str,
) -> Result<TrainOutcome> {
    train_from(
        ProminenceModel::new(model_config.clone(), config.seed)?,
        config,
        train_set,
        valid_set,
        feature_config_hash,
    )
}

pub fn train_from(
    mut model: ProminenceModel,
    config: &TrainConfig,
    train_set: &[Example],
    valid_set: &[Example],
    feature_config_hash: &str,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || valid_set.iter().all(|e| e.targets.is_none()) {
        return Err(Error::Training("train and validation sets must be non-empty".into()));
    }
    let checkpoint = |model: &ProminenceModel, step: u64, pearson: Option<f64>| Checkpoint {
        model: model.clone(),
        feature_config_hash: feature_config_hash.to_string(),
        step,
        optimizer: config.optimizer.clone(),
        validation_pearson: pearson,
        run_config_hash: None,
    };
    let mut best = checkpoint(&model, 0, None);
    let mut log = Vec::new();
    let frame_counts: Vec<usize> = train_set.iter().map(Example::frames).collect();
    let mut adam = Adam::new(config.optimizer.clone(), &model);

    let mut epoch = 0u64;
    let mut batches = Vec::new().into_iter();
    let (mut loss_sum, mut loss_steps) = (0.0, 0u64);
    for step in 1..=config.max_steps {
        let batch = match batches.next() {
            Some(batch) => batch,
            None => {
                let seed = config.seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                batches = make_batches(&frame_counts, config.max_frames_per_batch, seed)?.into_iter();
                epoch += 1;
                batches.next().expect("non-empty training set")
            }
        };
        let examples: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
        let (loss, gradients) = batch_loss_and_gradients(&model, &examples)?;
        if !loss.is_finite() || !gradients.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch: examples.iter().map(|e| e.id.clone()).collect(),
            });
        }
        adam.update(&mut model, &gradients);
        loss_sum += loss;
        loss_steps += 1;

        if step % config.validate_every == 0 {
            let (valid_pearson, valid_bce) = validate(&model, valid_set)?;
            log::info!(
                "step {step}: train loss {:.4}, valid pearson {valid_pearson:?}",
                loss_sum / loss_steps as f64
            );
            log.push(LogRecord {
                step,
                train_loss: loss_sum / loss_steps as f64,
                valid_pearson,
                valid_bce,
            });
            (loss_sum, loss_steps) = (0.0, 0);
            if let Some(p) = valid_pearson {
                if best.validation_pearson.map_or(true, |b| p > b) {
                    best = checkpoint(&model, step, Some(p));
                }
            }
        }
    }
    Ok(TrainOutcome { best, log })
}

/// Writes validation records as JSON lines.
pub fn write_log<W: Write>(mut writer: W, log: &[LogRecord]) -> Result<()> {
    for record in log {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_packing_example() {
        let counts = [40_000, 30_000, 20_000];
        let batches = pack_batches(&counts, &[0, 1, 2], 75_000).unwrap();
        assert_eq!(batches, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn batch_boundaries() {
        assert_eq!(make_batches(&[75_000], 75_000, 0).unwrap(), vec![vec![0]]);
        assert!(matches!(make_batches(&[75_001], 75_000, 0), Err(Error::Batch(_))));
    }

    #[test]
    fn every_item_once_and_within_budget() {
        let counts: Vec<usize> = (0..200).map(|i| 100 + (i * 37) % 900).collect();
        let batches = make_batches(&counts, 2500, 9).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
        assert!(batches
            .iter()
            .all(|b| b.iter().map(|&i| counts[i]).sum::<usize>() <= 2500));
        assert_eq!(batches, make_batches(&counts, 2500, 9).unwrap());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        assert!(TrainConfig {
            validate_every: 70,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            max_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }
}
