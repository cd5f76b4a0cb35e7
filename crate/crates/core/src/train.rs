//! Supervised training with early stopping on validation F1.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::data::ZeroShotSplit;
use crate::episode::{build_epoch, SamplerConfig, TrainingInstance};
use crate::error::{Error, Result};
use crate::eval::{gold_records, predict_dataset, score, sentences, GenerationConfig, Normalization};
use crate::data::Dataset;
use crate::model::DropoutRng;
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::system::{TgmSystem, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    /// Rate for matching-head and memory-generator parameters.
    pub lr_heads: f64,
    pub patience: usize,
    pub seed: u64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    /// Validate on at most this many validation sentences (0 = all).
    pub max_validation_samples: usize,
    pub normalization: Normalization,
    pub generation: GenerationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_backbone: 3e-5,
            lr_heads: 6e-4,
            patience: 5,
            seed: 0,
            clip_norm: 1.0,
            optimizer: OptimizerKind::Adam,
            max_validation_samples: 0,
            normalization: Normalization::CasefoldStrip,
            generation: GenerationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_heads", self.lr_heads)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("train.clip_norm must be >= 0".into()));
        }
        if self.generation.max_len == 0 {
            return Err(Error::Config("train.generation.max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub instances: usize,
    pub train_loss: f64,
    pub validation_f1: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: Option<usize>,
    /// Mean loss per optimizer step or meta-iteration.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// Index of the best validation F1; ties go to the earliest epoch.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<&EpochLog> = None;
        for e in &self.epochs {
            if best.is_none_or(|b| e.validation_f1 > b.validation_f1) {
                best = Some(e);
            }
        }
        best.map(|e| e.epoch)
    }

    /// Per-epoch CSV; the selected row carries a 1 in the last column.
    /// Wall times are left out so reruns produce identical bytes.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["epoch", "steps", "instances", "train_loss", "validation_f1", "selected"])
            .map_err(err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.steps.to_string(),
                e.instances.to_string(),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.validation_f1),
                u8::from(self.selected_epoch == Some(e.epoch)).to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_steps_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["step", "loss"]).map_err(err)?;
        for (i, l) in self.step_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.6}")]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Optimizer state plus clipping for one system.
#[derive(Debug, Clone)]
pub struct Stepper<F> {
    pub optimizer: Optimizer<F>,
    pub clip_norm: Option<F>,
}

impl<F: Scalar> Stepper<F> {
    pub fn for_system(system: &TgmSystem<F>, cfg: &TrainConfig) -> Self {
        Stepper {
            optimizer: Optimizer::grouped(
                cfg.optimizer,
                system.num_slots(),
                system.backbone_slots(),
                F::from_f64_lossy(cfg.lr_backbone),
                F::from_f64_lossy(cfg.lr_heads),
            ),
            clip_norm: (cfg.clip_norm > 0.0).then(|| F::from_f64_lossy(cfg.clip_norm)),
        }
    }

    /// Plain gradient descent with one rate for every slot.
    pub fn sgd(system: &TgmSystem<F>, lr: F, clip_norm: Option<F>) -> Self {
        Stepper {
            optimizer: Optimizer::new(OptimizerKind::Sgd, vec![lr; system.num_slots()]),
            clip_norm,
        }
    }

    /// One update on `batch`; returns the batch's mean loss before the update.
    pub fn step(&mut self, system: &mut TgmSystem<F>, batch: &[TrainingInstance], rng: Option<&mut DropoutRng>) -> Result<F> {
        let (loss, mut grads) = system.batch_gradients(batch, rng)?;
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        if let Some(c) = self.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        self.optimizer.step(system.tensors_mut(), &grads);
        Ok(loss)
    }
}

/// Triplet F1 on (a prefix of) the validation partition, prompting with the
/// validation labels.
pub fn validation_f1<F: Scalar>(system: &TgmSystem<F>, split: &ZeroShotSplit, cfg: &TrainConfig) -> Result<f64> {
    let labels: Vec<String> = split.validation_labels.iter().cloned().collect();
    let samples = split.validation.samples();
    let take = if cfg.max_validation_samples == 0 {
        samples.len()
    } else {
        cfg.max_validation_samples.min(samples.len())
    };
    if take == 0 {
        return Ok(0.0);
    }
    // evenly spaced, so every validation relation is represented
    let subset = Dataset::new((0..take).map(|i| samples[i * samples.len() / take].clone()).collect());
    let preds = predict_dataset(system, &sentences(&subset), &labels, &cfg.generation)?;
    Ok(score(&preds, &gold_records(&subset), cfg.normalization)?.f1)
}

/// Seeds of the sampling and dropout streams for a training seed.
pub(crate) fn rngs(seed: u64) -> (ChaCha8Rng, DropoutRng) {
    (ChaCha8Rng::seed_from_u64(seed), DropoutRng::seed_from_u64(seed ^ 0xD50F_0D0F))
}

/// Tracks the best epoch and decides when to stop.
pub(crate) struct EarlyStopper<F> {
    best: Option<(f64, Vec<ndarray::Array2<F>>)>,
    since_best: usize,
    patience: usize,
}

impl<F: Scalar> EarlyStopper<F> {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopper {
            best: None,
            since_best: 0,
            patience,
        }
    }

    /// Record an epoch; returns true when training should stop.
    pub(crate) fn observe(&mut self, system: &TgmSystem<F>, f1: f64) -> bool {
        if self.best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            self.best = Some((f1, system.tensors().into_iter().cloned().collect()));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.patience > 0 && self.since_best >= self.patience
    }

    pub(crate) fn restore_best(self, system: &mut TgmSystem<F>) {
        if let Some((_, tensors)) = self.best {
            for (dst, src) in system.tensors_mut().into_iter().zip(tensors) {
                *dst = src;
            }
        }
    }
}

/// Shared loop for the generator-only, matching and memory variants.
pub fn train_supervised<F: Scalar>(
    system: &mut TgmSystem<F>,
    split: &ZeroShotSplit,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    sampler.validate()?;
    split.validate()?;
    let pool = split.train_label_pool();
    let (mut rng, mut drop_rng) = rngs(cfg.seed);
    let mut stepper = Stepper::for_system(system, cfg);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut log = TrainLog::default();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let instances = build_epoch(&split.train, &pool, sampler, system.order, system.style, &mut rng)?;
        let mut total = 0.0;
        let mut steps = 0;
        for batch in instances.chunks(cfg.batch_size) {
            let loss = stepper.step(system, batch, Some(&mut drop_rng))?;
            let loss = loss.to_f64().unwrap();
            log.step_losses.push(loss);
            total += loss * batch.len() as f64;
            steps += 1;
        }
        let f1 = validation_f1(system, split, cfg)?;
        let train_loss = if instances.is_empty() { 0.0 } else { total / instances.len() as f64 };
        log::info!("{} epoch {epoch}: loss {train_loss:.4} validation F1 {f1:.4}", system.variant);
        log.epochs.push(EpochLog {
            epoch,
            steps,
            instances: instances.len(),
            train_loss,
            validation_f1: f1,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if stopper.observe(system, f1) {
            break;
        }
    }
    stopper.restore_best(system);
    log.selected_epoch = log.best_epoch();
    Ok(log)
}

fn expect_variant<F>(system: &TgmSystem<F>, want: Variant) -> Result<()> {
    if system.variant != want {
        return Err(Error::InvalidInput(format!(
            "expected a {want} system, got {}",
            system.variant
        )));
    }
    Ok(())
}

/// Generator-only training.
pub fn train_tgm<F: Scalar>(system: &mut TgmSystem<F>, split: &ZeroShotSplit, sampler: &SamplerConfig, cfg: &TrainConfig) -> Result<TrainLog> {
    expect_variant(system, Variant::Tgm)?;
    train_supervised(system, split, sampler, cfg)
}

/// Generation plus weighted matching loss on prototype-style targets.
pub fn train_tgm_metric<F: Scalar>(system: &mut TgmSystem<F>, split: &ZeroShotSplit, sampler: &SamplerConfig, cfg: &TrainConfig) -> Result<TrainLog> {
    expect_variant(system, Variant::Metric)?;
    train_supervised(system, split, sampler, cfg)
}

/// Generation conditioned on task memory, generator trained jointly.
pub fn train_tgm_model<F: Scalar>(system: &mut TgmSystem<F>, split: &ZeroShotSplit, sampler: &SamplerConfig, cfg: &TrainConfig) -> Result<TrainLog> {
    expect_variant(system, Variant::Model)?;
    train_supervised(system, split, sampler, cfg)
}
