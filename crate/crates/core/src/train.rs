//! Pairwise ranking-loss training of the reward head.
//!
//! The loss for a pair is `−log σ(f(better) − f(worse))`, averaged over a
//! mini-batch. Optimization is plain gradient descent with a cosine-decayed
//! learning rate; the head from the epoch with the best validation accuracy
//! is returned.

use std::borrow::Cow;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ComparisonPair;
use crate::embed::{EmbedError, FeatureIndex};
use crate::metrics::pair_outcome;
use crate::par;
use crate::reward::{init_head, HeadError, HeadGradients, RewardHead};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training pairs")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("pair ({prompt}, {image}) cannot be resolved: {source}")]
    Unresolved {
        prompt: String,
        image: String,
        #[source]
        source: EmbedError,
    },
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (lr {lr})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
    },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("writing report: {0}")]
    Report(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Per-pair loss `−log σ(Δ)`, evaluated as `softplus(−Δ)`.
pub fn pair_loss(score_better: f64, score_worse: f64) -> f64 {
    softplus(score_worse - score_better)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(∂L/∂better, ∂L/∂worse) = (σ(Δ)−1, 1−σ(Δ))`.
pub fn pair_loss_grad(score_better: f64, score_worse: f64) -> (f64, f64) {
    // σ(Δ) − 1 = −σ(−Δ), which keeps precision when Δ is large.
    let g = sigmoid(score_worse - score_better);
    (-g, g)
}

/// `base · ½(1 + cos(π·step/total))`. Steps past the horizon get 0.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    let total = total_steps.max(1);
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_learning_rate: f64,
    /// Pairs per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frozen_fraction: f64,
    /// Widths of the hidden layers; the input is `2·dim` and the output 1.
    pub hidden_dims: Vec<usize>,
    /// Horizon of the cosine schedule; defaults to `epochs × batches`.
    pub schedule_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_learning_rate: 1e-5,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            frozen_fraction: 0.7,
            hidden_dims: vec![2048],
            schedule_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_learning_rate >= 0.0 && self.base_learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.base_learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.frozen_fraction) {
            return Err(TrainError::InvalidConfig(format!(
                "frozen fraction {} outside [0, 1]",
                self.frozen_fraction
            )));
        }
        Ok(())
    }

    pub fn layer_dims(&self, embedding_dim: usize) -> Vec<usize> {
        std::iter::once(2 * embedding_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain([1])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose head was returned; 0 when no epoch ran.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_accuracy)
    }

    /// Line-delimited report: step records, then epoch records.
    pub fn write_report(&self, out: &mut impl Write) -> std::io::Result<()> {
        for s in &self.steps {
            writeln!(out, "{}", serde_json::to_string(s).expect("serializable"))?;
        }
        for e in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(e).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn save_report(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_report(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

/// Pairs with their fused features resolved once up front.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    features: Vec<Vec<f64>>,
    /// `(better, worse)` indices into `features`.
    pairs: Vec<(usize, usize)>,
    dim: usize,
}

impl PairFeatures {
    pub fn resolve(pairs: &[ComparisonPair], index: &FeatureIndex<'_>) -> Result<Self> {
        let mut slots: HashMap<(&str, &str), usize> = HashMap::new();
        let mut features = Vec::new();
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut ends = [0usize; 2];
            for (slot, image) in ends.iter_mut().zip([&p.better_id, &p.worse_id]) {
                let key = (p.prompt_id.as_str(), image.as_str());
                *slot = match slots.get(&key) {
                    Some(&i) => i,
                    None => {
                        let f = index.feature(&p.prompt_id, image).map_err(|source| {
                            TrainError::Unresolved {
                                prompt: p.prompt_id.clone(),
                                image: image.clone(),
                                source,
                            }
                        })?;
                        features.push(f.0);
                        slots.insert(key, features.len() - 1);
                        features.len() - 1
                    }
                };
            }
            out.push((ends[0], ends[1]));
        }
        Ok(Self {
            features,
            pairs: out,
            dim: index.store().dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// Same pairs with every feature replaced by `f(feature)`.
    fn map_features<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>, HeadError> + Sync + Send,
    {
        let features = par::map(&self.features, |v| f(v))
            .into_iter()
            .collect::<Result<Vec<_>, HeadError>>()?;
        Ok(Self {
            features,
            pairs: self.pairs.clone(),
            dim: self.dim,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn pair(&self, i: usize) -> (&[f64], &[f64]) {
        let (b, w) = self.pairs[i];
        (&self.features[b], &self.features[w])
    }

    /// Fraction of pairs the head orders correctly, ties counting ½.
    pub fn accuracy(&self, head: &RewardHead) -> Result<f64> {
        let scores = par::map(&self.features, |f| head.forward(f));
        let scores = scores.into_iter().collect::<Result<Vec<f64>, HeadError>>()?;
        Ok(self.accuracy_of(&scores))
    }

    fn accuracy_from(&self, head: &RewardHead, start: usize) -> f64 {
        let scores = par::map(&self.features, |f| head.forward_from(start, f));
        self.accuracy_of(&scores)
    }

    fn accuracy_of(&self, scores: &[f64]) -> f64 {
        let total: f64 = self
            .pairs
            .iter()
            .map(|&(b, w)| pair_outcome(scores[b], scores[w]))
            .sum();
        total / self.pairs.len() as f64
    }
}

/// Mean loss and mean gradient over the pairs at `indices`.
pub fn batch_gradient(
    head: &RewardHead,
    data: &PairFeatures,
    indices: &[usize],
) -> Result<(f64, HeadGradients)> {
    if data.dim * 2 != head.input_dim() {
        return Err(HeadError::DimMismatch {
            expected: head.input_dim(),
            found: data.dim * 2,
        }
        .into());
    }
    Ok(batch_gradient_from(head, 0, data, indices))
}

/// As [`batch_gradient`], with `data` holding activations entering layer
/// `start`.
fn batch_gradient_from(
    head: &RewardHead,
    start: usize,
    data: &PairFeatures,
    indices: &[usize],
) -> (f64, HeadGradients) {
    let mut grads = HeadGradients::zeros_like(head);
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        let (better, worse) = data.pair(i);
        let sb = head.forward_from(start, better);
        let sw = head.forward_from(start, worse);
        loss += pair_loss(sb, sw);
        let (gb, gw) = pair_loss_grad(sb, sw);
        head.accumulate_from(start, better, gb * scale, &mut grads);
        head.accumulate_from(start, worse, gw * scale, &mut grads);
    }
    (loss * scale, grads)
}

pub struct TrainOutcome {
    pub head: RewardHead,
    pub history: TrainHistory,
}

/// Trains a fresh head on resolved pairs. The loop is single-threaded so a
/// fixed seed reproduces the head bit for bit.
pub fn train_features(config: &TrainConfig, train: &PairFeatures, val: &PairFeatures) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut head = init_head(&config.layer_dims(train.embedding_dim()), config.seed)?
        .with_frozen_fraction(config.frozen_fraction);
    // The frozen input-side layers never change, so their outputs are
    // computed once. Scores and gradients are identical to full passes.
    let start = head.frozen_prefix().min(head.layers().len() - 1);
    let (train, val) = if start > 0 {
        let cut = |f: &[f64]| head.activations_at(f, start);
        (Cow::Owned(train.map_features(cut)?), Cow::Owned(val.map_features(cut)?))
    } else {
        (Cow::Borrowed(train), Cow::Borrowed(val))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total = config
        .schedule_steps
        .unwrap_or(config.epochs * batches_per_epoch)
        .max(1);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, RewardHead)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total, config.base_learning_rate);
            let (loss, grads) = batch_gradient_from(&head, start, &train, batch);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, lr, loss });
            }
            head.apply_gradients(&grads, lr);
            history.steps.push(StepRecord { step, lr, loss });
            step += 1;
        }
        let val_accuracy = if val.is_empty() {
            train.accuracy_from(&head, start)
        } else {
            val.accuracy_from(&head, start)
        };
        history.epochs.push(EpochRecord { epoch, val_accuracy });
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, head.clone()));
            history.best_epoch = epoch;
        }
    }
    let head = best.map(|(_, h)| h).unwrap_or(head);
    Ok(TrainOutcome { head, history })
}

/// Resolves pairs through `index` and trains.
pub fn train(
    config: &TrainConfig,
    train_pairs: &[ComparisonPair],
    val_pairs: &[ComparisonPair],
    index: &FeatureIndex<'_>,
) -> Result<TrainOutcome> {
    if train_pairs.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let train = PairFeatures::resolve(train_pairs, index)?;
    let val = PairFeatures::resolve(val_pairs, index)?;
    train_features(config, &train, &val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Position of the config in the input list.
    pub index: usize,
    pub config: TrainConfig,
    pub val_accuracy: f64,
    pub best_epoch: usize,
}

/// Trains every config (runs spread over workers) and orders them by
/// validation accuracy, breaking ties by lower learning rate, smaller
/// batch, then input position.
pub fn grid_search(
    configs: &[TrainConfig],
    train: &PairFeatures,
    val: &PairFeatures,
) -> Result<Vec<GridResult>> {
    if configs.is_empty() {
        return Err(TrainError::InvalidConfig("grid search needs at least one config".into()));
    }
    let runs = par::map_range(configs.len(), |i| {
        train_features(&configs[i], train, val).map(|out| GridResult {
            index: i,
            config: configs[i].clone(),
            val_accuracy: out.history.best_val_accuracy().unwrap_or(0.0),
            best_epoch: out.history.best_epoch,
        })
    });
    let mut results = runs.into_iter().collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| {
        b.val_accuracy
            .total_cmp(&a.val_accuracy)
            .then(a.config.base_learning_rate.total_cmp(&b.config.base_learning_rate))
            .then(a.config.batch_size.cmp(&b.config.batch_size))
            .then(a.index.cmp(&b.index))
    });
    Ok(results)
}
