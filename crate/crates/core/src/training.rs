//! Teacher-forced training with warmup, Adam and early stopping.

use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment, load_image, preprocess_image, DatasetManifest, ImageError};
use crate::model::{CaptionerModel, FeatureExtractor, Grads, ModelError, Mode, ParamStore, SampleStats, Transformer};
use crate::text::{vectorize, TextConfig, TokenSequence, Vocabulary, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Defaults to the number of batches in one epoch.
    pub warmup_steps: Option<usize>,
    /// Random rotation/flip/contrast on training images each epoch.
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            base_lr: 1e-4,
            epochs: 50,
            patience: 3,
            seed: 0,
            warmup_steps: None,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.batch_size > 0
            && self.base_lr > 0.0
            && self.base_lr.is_finite()
            && self.epochs > 0
            && self.patience >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }

    /// Warmup length for an epoch of `batches_per_epoch` batches.
    pub fn resolved_warmup(&self, batches_per_epoch: usize) -> usize {
        self.warmup_steps.unwrap_or(batches_per_epoch)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no unmasked target positions")]
    EmptyMask,
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("sample {index}: {reason}")]
    Mismatch { index: usize, reason: String },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: ImageError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Linear ramp from 0 at step 0 to `base_lr` at `warmup_steps`, constant after.
pub fn warmup_schedule(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step >= warmup_steps {
        base_lr
    } else {
        base_lr * step as f64 / warmup_steps as f64
    }
}

/// Mean of `-ln p(target)` over non-padding targets.
pub fn masked_loss(probs: &Array2<f64>, targets: &[u32]) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        if t != PAD_ID {
            sum -= row[t as usize].max(f64::MIN_POSITIVE).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// Fraction of non-padding targets whose argmax matches.
pub fn masked_accuracy(probs: &Array2<f64>, targets: &[u32]) -> Result<f64, TrainError> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        if t != PAD_ID {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                .0;
            hits += usize::from(best == t as usize);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(hits as f64 / n as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let ids: Vec<_> = params.ids().collect();
        for ((id, g), (m, v)) in ids.into_iter().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            Zip::from(params.get_mut(id))
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Patience-based stopping rule on validation loss. Only a strictly lower
/// loss counts as an improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Observation {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        Observation {
            improved,
            stop: self.wait >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    pub epochs_run: usize,
    /// 1-based epoch whose state was restored.
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    pub stopped_early: bool,
}

/// Runs `epoch_fn` for epochs `1..=epochs`, each returning a validation
/// loss, stops by [`EarlyStopping`], and leaves `state` as it was after the
/// best epoch.
pub fn fit_with<S: Clone, E>(
    state: &mut S,
    epochs: usize,
    patience: usize,
    mut epoch_fn: impl FnMut(&mut S, usize) -> Result<f64, E>,
) -> Result<FitSummary, E> {
    let mut rule = EarlyStopping::new(patience);
    let mut best: Option<S> = None;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 1..=epochs {
        let loss = epoch_fn(state, epoch)?;
        epochs_run = epoch;
        let obs = rule.observe(epoch, loss);
        if obs.improved {
            best = Some(state.clone());
        }
        if obs.stop && epoch < epochs {
            stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        *state = b;
    }
    Ok(FitSummary {
        epochs_run,
        best_epoch: rule.best_epoch(),
        best_loss: rule.best_loss(),
        stopped_early,
    })
}

/// Parameter snapshot taken at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ParamStore,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc";

impl MetricsHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    fn push(&mut self, train: EpochMetrics, val: EpochMetrics) {
        self.train_loss.push(train.loss);
        self.train_acc.push(train.accuracy);
        self.val_loss.push(val.loss);
        self.val_acc.push(val.accuracy);
    }
}

/// CSV with one row per epoch.
pub fn export_history(history: &MetricsHistory) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for i in 0..history.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            i + 1,
            history.train_loss[i],
            history.train_acc[i],
            history.val_loss[i],
            history.val_acc[i]
        );
    }
    out
}

pub fn parse_history(text: &str) -> Result<MetricsHistory, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
        return Err("missing history header".into());
    }
    let mut h = MetricsHistory::default();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!("row {}: expected 5 fields", n + 1));
        }
        let v: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.trim().parse::<f64>()).collect();
        let v = v.map_err(|e| format!("row {}: {e}", n + 1))?;
        h.train_loss.push(v[0]);
        h.train_acc.push(v[1]);
        h.val_loss.push(v[2]);
        h.val_acc.push(v[3]);
    }
    Ok(h)
}

/// One training or validation example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Image file, reloaded for augmentation. `None` disables augmentation.
    pub source: Option<PathBuf>,
    /// Features of the unaugmented image.
    pub features: Array2<f32>,
    pub tokens: TokenSequence,
}

/// Loads, preprocesses and extracts features for every manifest record.
pub fn prepare_samples(
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    text: &TextConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Sample>, TrainError> {
    manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(index, record)| {
            let caption = manifest.caption(record).ok_or_else(|| TrainError::Mismatch {
                index,
                reason: format!("no caption for {}", record.filename),
            })?;
            let img_err = |source| TrainError::Image {
                path: record.path.display().to_string(),
                source,
            };
            let raw = load_image(&record.path).map_err(img_err)?;
            let prepared = preprocess_image(&raw, record.filename.clone()).map_err(img_err)?;
            Ok(Sample {
                source: Some(record.path.clone()),
                features: extractor.extract(&prepared),
                tokens: vectorize(&caption.text, vocab, text),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-sample gradients are reduced in fixed-size chunks so results do not
/// depend on the thread count.
const REDUCE_CHUNK: usize = 8;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

fn check_samples(model: &Transformer, samples: &[Sample]) -> Result<(), TrainError> {
    let cfg = model.config();
    for (index, s) in samples.iter().enumerate() {
        let reason = if s.tokens.ids.len() != cfg.seq_len {
            Some(format!("sequence length {} != seq_len {}", s.tokens.ids.len(), cfg.seq_len))
        } else if s.tokens.ids.iter().any(|&id| id as usize >= cfg.vocab_size) {
            Some("token id outside the vocabulary".to_string())
        } else if s.features.ncols() != model.feature_dim() {
            Some(format!("feature width {} != {}", s.features.ncols(), model.feature_dim()))
        } else if !s.tokens.target_ids().iter().any(|&t| t != PAD_ID) {
            Some("caption has no target tokens".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(TrainError::Mismatch { index, reason });
        }
    }
    Ok(())
}

/// Inference-mode metrics: per-batch masked means, averaged over batches.
pub fn evaluate_metrics(model: &Transformer, samples: &[Sample], batch_size: usize) -> Result<EpochMetrics, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    check_samples(model, samples)?;
    let mut batches = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let stats = chunk
            .par_iter()
            .map(|s| model.sample_stats(&s.features, &s.tokens.ids, &mut Mode::Inference))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(SampleStats::default(), SampleStats::merge);
        batches.push(EpochMetrics {
            loss: stats.loss_sum / stats.tokens as f64,
            accuracy: stats.correct as f64 / stats.tokens as f64,
        });
    }
    Ok(mean_metrics(&batches))
}

fn mean_metrics(batches: &[EpochMetrics]) -> EpochMetrics {
    let n = batches.len() as f64;
    EpochMetrics {
        loss: batches.iter().map(|b| b.loss).sum::<f64>() / n,
        accuracy: batches.iter().map(|b| b.accuracy).sum::<f64>() / n,
    }
}

/// Training-mode forward/backward over one batch; returns the pooled
/// gradient of the batch mean loss and the batch stats.
fn batch_gradients(
    model: &Transformer,
    batch: &[(usize, Array2<f32>, &TokenSequence)],
    seed: u64,
    step: u64,
) -> Result<(Grads, SampleStats), TrainError> {
    let total: usize = batch
        .iter()
        .map(|(_, _, t)| t.target_ids().iter().filter(|&&id| id != PAD_ID).count())
        .sum();
    let scale = 1.0 / total as f64;
    let partials = batch
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut grads = Grads::zeros_like(model.params());
            let mut stats = SampleStats::default();
            for (idx, features, tokens) in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, *idx as u64));
                let s = model.sample_loss_and_grads(features, &tokens.ids, scale, &mut Mode::Training(&mut rng), &mut grads)?;
                stats = stats.merge(s);
            }
            Ok((grads, stats))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut iter = partials.into_iter();
    let first = iter.next().expect("non-empty batch");
    Ok(iter.fold(first, |(g, s), (g2, s2)| (g.merge(g2), s.merge(s2))))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: MetricsHistory,
    pub best: Option<Checkpoint>,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Progress callback: `(epoch, train, val)` after each epoch.
pub type EpochCallback<'a> = dyn FnMut(usize, EpochMetrics, EpochMetrics) + 'a;

/// Trains `model` in place. On return the parameters are those of the
/// epoch with the lowest validation loss.
pub fn train(
    model: &mut CaptionerModel,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    on_epoch: Option<&mut EpochCallback>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    check_samples(&model.transformer, train_set)?;
    check_samples(&model.transformer, val_set)?;
    let extractor = model.extractor.clone();
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let warmup = config.resolved_warmup(batches_per_epoch);
    let mut on_epoch = on_epoch;
    let mut adam = {
        let p = model.transformer.params();
        Adam::new(p, config.beta1, config.beta2, config.epsilon)
    };
    let mut rule = EarlyStopping::new(config.patience);
    let mut history = MetricsHistory::default();
    let mut best: Option<Checkpoint> = None;
    let mut stopped_early = false;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut batch_metrics = Vec::with_capacity(batches_per_epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let features = match (&s.source, config.augment) {
                        (Some(path), true) => {
                            let img_err = |source| TrainError::Image {
                                path: path.display().to_string(),
                                source,
                            };
                            let raw = load_image(path).map_err(img_err)?;
                            let prepared = preprocess_image(&raw, path.display().to_string()).map_err(img_err)?;
                            extractor.extract(&augment(&prepared, mix(config.seed, epoch as u64, i as u64 + 1)))
                        }
                        _ => s.features.clone(),
                    };
                    Ok((i, features, &s.tokens))
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let (grads, stats) = batch_gradients(&model.transformer, &batch, config.seed, step as u64)?;
            let lr = warmup_schedule(step, config.base_lr, warmup);
            adam.step(model.transformer.params_mut(), &grads, lr);
            step += 1;
            batch_metrics.push(EpochMetrics {
                loss: stats.loss_sum / stats.tokens as f64,
                accuracy: stats.correct as f64 / stats.tokens as f64,
            });
        }
        let train_metrics = mean_metrics(&batch_metrics);
        let val_metrics = evaluate_metrics(&model.transformer, val_set, config.batch_size)?;
        history.push(train_metrics, val_metrics);
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(epoch, train_metrics, val_metrics);
        }
        let obs = rule.observe(epoch, val_metrics.loss);
        if obs.improved {
            best = Some(Checkpoint {
                epoch,
                val_loss: val_metrics.loss,
                params: model.transformer.params().clone(),
            });
        }
        if obs.stop && epoch < config.epochs {
            stopped_early = true;
            break;
        }
    }
    if let Some(cp) = &best {
        model.transformer.load_params(&cp.params)?;
    }
    Ok(TrainOutcome {
        history,
        best,
        stopped_early,
        steps: step,
    })
}
