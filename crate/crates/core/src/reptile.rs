//! First-order meta-training: adapt copies of the generator to sampled tasks,
//! then move the shared parameters toward the mean adapted parameters.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::data::ZeroShotSplit;
use crate::episode::{sample_meta_batch, MetaTask, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::{DropoutRng, ParameterSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::system::{TgmSystem, Variant};
use crate::train::{rngs, validation_f1, EarlyStopper, EpochLog, Stepper, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReptileConfig {
    pub n_tasks: usize,
    /// Instances per sampled task.
    pub k_per_task: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub inner_optimizer: OptimizerKind,
    pub epsilon: f64,
    /// When set, the step size decays linearly to this value over training.
    pub epsilon_final: Option<f64>,
    /// Meta-iterations per epoch; 0 sizes an epoch to match one pass of
    /// the supervised trainer.
    pub meta_iterations: usize,
    /// Run the inner adaptations of one meta-iteration on separate threads.
    pub parallel: bool,
}

impl Default for ReptileConfig {
    fn default() -> Self {
        ReptileConfig {
            n_tasks: 4,
            k_per_task: 4,
            inner_steps: 4,
            inner_lr: 0.1,
            inner_optimizer: OptimizerKind::Sgd,
            epsilon: 0.5,
            epsilon_final: None,
            meta_iterations: 0,
            parallel: false,
        }
    }
}

impl ReptileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.k_per_task == 0 {
            return Err(Error::Config("reptile.n_tasks and reptile.k_per_task must be positive".into()));
        }
        let in_range = |e: f64| e > 0.0 && e <= 1.0;
        if !in_range(self.epsilon) {
            return Err(Error::Config("reptile.epsilon must lie in (0, 1]".into()));
        }
        if self.epsilon_final.is_some_and(|e| !in_range(e)) {
            return Err(Error::Config("reptile.epsilon_final must lie in (0, 1]".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config("reptile.inner_lr must be positive".into()));
        }
        Ok(())
    }

    fn epsilon_at(&self, progress: f64) -> f64 {
        match self.epsilon_final {
            Some(end) => self.epsilon + (end - self.epsilon) * progress,
            None => self.epsilon,
        }
    }
}

/// Adapt a copy of the generator to one task and return its parameters.
/// The system itself is left untouched.
pub fn inner_adapt<F: Scalar>(
    system: &TgmSystem<F>,
    task: &MetaTask,
    cfg: &ReptileConfig,
    clip_norm: Option<F>,
    rng: Option<&mut DropoutRng>,
) -> Result<ParameterSet<F>> {
    adapt(system, task, cfg, clip_norm, rng).map(|(p, _)| p)
}

/// Adapted parameters and the loss seen by the first inner step.
fn adapt<F: Scalar>(
    system: &TgmSystem<F>,
    task: &MetaTask,
    cfg: &ReptileConfig,
    clip_norm: Option<F>,
    mut rng: Option<&mut DropoutRng>,
) -> Result<(ParameterSet<F>, f64)> {
    if task.instances.is_empty() {
        return Err(Error::InvalidInput("task has no instances".into()));
    }
    let mut local = system.clone();
    let lr = F::from_f64_lossy(cfg.inner_lr);
    let mut stepper = Stepper {
        optimizer: Optimizer::new(cfg.inner_optimizer, vec![lr; local.num_slots()]),
        clip_norm,
    };
    let mut first = 0.0;
    for i in 0..cfg.inner_steps {
        let loss = stepper.step(&mut local, &task.instances, rng.as_deref_mut())?;
        if i == 0 {
            first = loss.to_f64().unwrap();
        }
    }
    Ok((local.model.snapshot(), first))
}

/// `psi + epsilon * mean(adapted_i - psi)`, exact at both ends of the range:
/// `epsilon = 0` returns `psi` and `epsilon = 1` with one task returns the
/// adapted parameters.
pub fn reptile_step<F: Scalar>(psi: &ParameterSet<F>, adapted: &[ParameterSet<F>], epsilon: F) -> Result<ParameterSet<F>> {
    if adapted.is_empty() {
        return Err(Error::InvalidInput("no adapted parameter sets".into()));
    }
    let n = F::from_usize(adapted.len()).unwrap();
    let mut mean_delta = adapted[0].difference(psi)?;
    for a in &adapted[1..] {
        mean_delta.axpy(F::one(), &a.difference(psi)?)?;
    }
    if adapted.len() > 1 {
        mean_delta = mean_delta.map(|x| x / n);
    }
    let half = F::from_f64_lossy(0.5);
    if epsilon < half {
        let mut out = psi.clone();
        out.axpy(epsilon, &mean_delta)?;
        Ok(out)
    } else {
        // approach from the far end so epsilon = 1 lands exactly
        let mut out = if adapted.len() == 1 {
            adapted[0].clone()
        } else {
            let mut m = psi.clone();
            m.axpy(F::one(), &mean_delta)?;
            m
        };
        out.axpy(-(F::one() - epsilon), &mean_delta)?;
        Ok(out)
    }
}

/// Adapt to every task; the parallel path reduces in task order and so
/// returns exactly what the sequential path returns.
pub fn adapt_all<F: Scalar>(
    system: &TgmSystem<F>,
    tasks: &[MetaTask],
    cfg: &ReptileConfig,
    clip_norm: Option<F>,
    seeds: &[u64],
) -> Result<Vec<(ParameterSet<F>, f64)>> {
    assert_eq!(tasks.len(), seeds.len());
    let run = |task: &MetaTask, seed: u64| {
        let mut rng = DropoutRng::seed_from_u64(seed);
        adapt(system, task, cfg, clip_norm, Some(&mut rng))
    };
    if cfg.parallel && tasks.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = tasks
                .iter()
                .zip(seeds)
                .map(|(t, &seed)| s.spawn(move || run(t, seed)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("adaptation thread panicked")).collect()
        })
    } else {
        tasks.iter().zip(seeds).map(|(t, &seed)| run(t, seed)).collect()
    }
}

/// Outcome of one meta-iteration.
#[derive(Debug, Clone)]
pub struct MetaStep {
    pub tasks: Vec<MetaTask>,
    pub loss: f64,
}

/// Meta-training of the generator with early stopping on validation F1.
pub fn train_tgm_optimization<F: Scalar>(
    system: &mut TgmSystem<F>,
    split: &ZeroShotSplit,
    sampler: &SamplerConfig,
    reptile: &ReptileConfig,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if system.variant != Variant::Optimization {
        return Err(Error::InvalidInput(format!("expected an optimization system, got {}", system.variant)));
    }
    train_reptile(system, split, sampler, reptile, cfg, |_, _| {})
}

/// The meta-training loop; `observe` sees every meta-iteration and the
/// system right after its update.
pub fn train_reptile<F: Scalar>(
    system: &mut TgmSystem<F>,
    split: &ZeroShotSplit,
    sampler: &SamplerConfig,
    reptile: &ReptileConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&MetaStep, &TgmSystem<F>),
) -> Result<TrainLog> {
    cfg.validate()?;
    reptile.validate()?;
    sampler.validate()?;
    split.validate()?;
    let pool = split.train_label_pool();
    let (mut rng, _) = rngs(cfg.seed);
    let clip = (cfg.clip_norm > 0.0).then(|| F::from_f64_lossy(cfg.clip_norm));
    let per_epoch = if reptile.meta_iterations > 0 {
        reptile.meta_iterations
    } else {
        (split.train.len() * sampler.t).div_ceil(reptile.n_tasks * reptile.k_per_task).max(1)
    };
    let total_iters = (per_epoch * cfg.epochs) as f64;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut done = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let tasks = sample_meta_batch(
                &split.train,
                &pool,
                reptile.n_tasks,
                reptile.k_per_task,
                sampler,
                system.order,
                system.style,
                &mut rng,
            )?;
            let seeds: Vec<u64> = (0..tasks.len()).map(|_| rng.random()).collect();
            let psi = system.model.snapshot();
            let (adapted, losses): (Vec<_>, Vec<f64>) =
                adapt_all(system, &tasks, reptile, clip, &seeds)?.into_iter().unzip();
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            let eps = reptile.epsilon_at(done as f64 / total_iters.max(1.0));
            let next = reptile_step(&psi, &adapted, F::from_f64_lossy(eps))?;
            system.model.restore(&next)?;
            done += 1;
            total += loss;
            log.step_losses.push(loss);
            observe(&MetaStep { tasks, loss }, system);
        }
        let f1 = validation_f1(system, split, cfg)?;
        let train_loss = total / per_epoch as f64;
        log::info!("optimization epoch {epoch}: loss {train_loss:.4} validation F1 {f1:.4}");
        log.epochs.push(EpochLog {
            epoch,
            steps: per_epoch,
            instances: per_epoch * reptile.n_tasks * reptile.k_per_task,
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
