//! Training loop: batched `L_o + L_t` with AdamW, cosine decay and an
//! optional incremental class schedule.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{scale_jitter, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{LossWeights, Model, ModelConfig};
use crate::tensor::{AdamW, AdamWConfig, GradBuffer, Graph};
use crate::tokenizer::{Vocabulary, DEFAULT_TASKS};

/// Classes that become visible at `iteration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unlock {
    pub iteration: usize,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Parameter initialisation seed.
    pub seed: u64,
    /// Seed for batch order, augmentation and RoI sampling.
    pub data_seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cosine: bool,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub loss_weights: LossWeights,
    /// Probability of each task's description per region, in task order.
    pub task_mixture: Vec<f64>,
    pub task_tokens: Vec<String>,
    pub incremental: Vec<Unlock>,
    pub scale_jitter: Option<[f64; 2]>,
    /// Extra matched cascade boxes per image fed to the decoder.
    pub extra_regions: usize,
    pub vocab_size: usize,
    pub log_every: usize,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 1,
            iterations: 5000,
            batch_size: 2,
            lr: 3e-3,
            cosine: true,
            warmup: 100,
            weight_decay: 0.05,
            clip_norm: 1.0,
            loss_weights: LossWeights::default(),
            task_mixture: vec![0.5, 0.5],
            task_tokens: DEFAULT_TASKS.iter().map(|s| s.to_string()).collect(),
            incremental: Vec::new(),
            scale_jitter: Some([0.8, 1.25]),
            extra_regions: 3,
            vocab_size: 256,
            log_every: 10,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("iterations, batch_size and log_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.model.decoder.single_begin_token {
            if self.task_tokens.len() != 1 {
                return Err(Error::Config(format!(
                    "single_begin_token needs exactly one task token, got {}",
                    self.task_tokens.len()
                )));
            }
        } else if self.task_mixture.len() != self.task_tokens.len() {
            return Err(Error::Config(format!(
                "task_mixture has {} entries for {} task tokens",
                self.task_mixture.len(),
                self.task_tokens.len()
            )));
        }
        let sum: f64 = self.task_mixture.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.task_mixture.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!("task mixture ratios must be non-negative and sum to 1, got {sum}")));
        }
        if let Some([lo, hi]) = self.scale_jitter {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("scale_jitter range [{lo}, {hi}] is invalid")));
            }
        }
        self.model.validate()
    }

    /// Learning rate at `step`: linear warmup, then cosine decay to zero
    /// (or constant without `cosine`).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = (self.iterations - self.warmup.min(self.iterations)).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Classes still hidden at `step`.
    pub fn hidden_classes(&self, step: usize) -> BTreeSet<&str> {
        self.incremental
            .iter()
            .filter(|u| u.iteration > step)
            .flat_map(|u| u.classes.iter().map(String::as_str))
            .collect()
    }
}

/// Mean losses over one logging window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub object: f64,
    pub text: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Vocabulary over every annotation text of `data`.
pub fn build_vocab(cfg: &TrainConfig, data: &Dataset) -> Result<Vocabulary> {
    let corpus: Vec<&str> = data.annotations.iter().map(|a| a.text.as_str()).collect();
    let tasks: Vec<&str> = cfg.task_tokens.iter().map(String::as_str).collect();
    Vocabulary::build(&corpus, cfg.vocab_size, &tasks)
}

fn visible(sample: &Sample, hidden: &BTreeSet<&str>) -> Sample {
    let mut s = sample.clone();
    s.objects.retain(|o| o.class().map_or(true, |c| !hidden.contains(c)));
    s
}

/// Trains a fresh model on `data`. When `out_dir` is given, a non-finite
/// loss writes the last good parameters there before aborting.
pub fn train(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    train_with(cfg, data, out_dir, |_| {})
}

/// As [`train`], calling `on_log` with every loss record.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut on_log: impl FnMut(&LossRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let samples = data.samples()?;
    if samples.is_empty() {
        return Err(Error::contract("train", "dataset has no images"));
    }
    let vocab = build_vocab(cfg, data)?;
    let mut model = Model::new(&cfg.model, vocab, cfg.seed)?;
    let mut adam = AdamW::new(
        &model.store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut grads = GradBuffer::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::new();
    let mut window = [0.0f64; 3];
    let mut window_len = 0usize;
    let inv_batch = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.iterations {
        let lr = cfg.lr_at(step);
        let hidden = cfg.hidden_classes(step);
        grads.clear();
        let mut sums = [0.0f64; 3];
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let idx = order.pop().unwrap_or(0);
            let mut sample = visible(&samples[idx], &hidden);
            if let Some([lo, hi]) = cfg.scale_jitter {
                let s = rng.gen_range(lo..=hi);
                sample = scale_jitter(&sample, s, &mut rng);
            }
            let targets = model.targets(&sample.objects);
            let image = sample.image.to_tensor();
            let mut g = Graph::training(&model.store);
            let (terms, _) = model.image_loss(
                &mut g,
                &image,
                &targets,
                cfg.loss_weights,
                &cfg.task_mixture,
                cfg.extra_regions,
                None,
                &mut rng,
            )?;
            let total = g.value(terms.total).data()[0];
            sums[0] += total;
            sums[1] += g.value(terms.object.total).data()[0];
            sums[2] += terms.text.map_or(0.0, |t| g.value(t).data()[0]);
            if !total.is_finite() {
                return Err(abort(&model, step, out_dir));
            }
            g.backward(terms.total)?;
            grads.accumulate(&mut g, inv_batch);
        }
        if !grads.is_finite() {
            return Err(abort(&model, step, out_dir));
        }
        grads.clip(cfg.clip_norm);
        adam.step(&mut model.store, &grads, lr)?;
        for k in 0..3 {
            window[k] += sums[k] * inv_batch;
        }
        window_len += 1;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            let n = window_len as f64;
            let rec = LossRecord {
                step: step + 1,
                total: window[0] / n,
                object: window[1] / n,
                text: window[2] / n,
                lr,
            };
            log::info!(
                "step {:>5}  loss {:.4}  L_o {:.4}  L_t {:.4}  lr {:.2e}",
                rec.step,
                rec.total,
                rec.object,
                rec.text,
                rec.lr
            );
            on_log(&rec);
            log.push(rec);
            window = [0.0; 3];
            window_len = 0;
        }
    }
    Ok(TrainOutput { model, log })
}

fn abort(model: &Model, step: usize, out_dir: Option<&Path>) -> Error {
    let path = out_dir.map(|d| d.join("last_good.ckpt"));
    let written = match &path {
        Some(p) => match checkpoint::save(model, p) {
            Ok(()) => p.display().to_string(),
            Err(e) => format!("(failed to write: {e})"),
        },
        None => "(no output directory)".to_string(),
    };
    log::error!("non-finite loss at step {step}");
    Error::NonFiniteLoss {
        step,
        checkpoint: written,
    }
}

/// Where `train` writes its artifacts inside `out_dir`.
pub fn artifact_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join("model.ckpt"), out_dir.join("loss_log.jsonl"))
}
