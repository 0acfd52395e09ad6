//! Mini-batch Adam training with per-epoch checkpoints, and evaluation.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::influence::fraction_count;
use crate::math;
use crate::model::{Example, TinyLm};
use crate::optimizer::{self, AdamConfig, AdamState, LrSchedule, ScheduleKind};
use crate::params::ParamVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 4,
            peak_lr: 0.01,
            schedule: ScheduleKind::Constant,
            warmup_fraction: 0.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn schedule_for(&self, n: usize) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            peak: self.peak_lr,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.steps_per_epoch(n) * self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        self.adam.validate()
    }
}

/// Model state after one epoch: full parameters, the optimizer snapshot over
/// the trainable segments, and that epoch's mean learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ParamVector,
    pub adam: AdamState,
    pub avg_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// Mean loss over the training set, measured after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_params: ParamVector,
}

/// Mean trainable-segment gradient over a batch.
pub fn batch_grad(model: &TinyLm, params: &ParamVector, batch: &[&Example]) -> Result<Vec<f64>> {
    let mut acc = alloc::vec![0.0; model.trainable_len()];
    for ex in batch {
        let g = model.grad(ex, params, true)?;
        math::axpy(1.0, &g.values, &mut acc);
    }
    math::scale(1.0 / batch.len() as f64, &mut acc);
    Ok(acc)
}

pub fn mean_loss(model: &TinyLm, params: &ParamVector, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        total += model.loss(ex, params)?;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the trainable segments with Adam; `on_epoch` sees each checkpoint.
pub fn train(
    model: &TinyLm,
    init: ParamVector,
    examples: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainRun> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let schedule = config.schedule_for(examples.len());
    schedule.validate()?;
    let steps_per_epoch = config.steps_per_epoch(examples.len());
    let mut params = init;
    let mut trainable = model.trainable(&params);
    let mut state = AdamState::new(trainable.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = math::rng(math::sub_seed(config.seed, 0x7a1));
    let mut step = 0usize;
    let mut run = TrainRun {
        checkpoints: Vec::with_capacity(config.epochs),
        epoch_losses: Vec::with_capacity(config.epochs),
        final_params: params.clone(),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let g = batch_grad(model, &params, &batch)?;
            if !math::all_finite(&g) {
                return Err(Error::Diverged { epoch, step });
            }
            optimizer::adam_step(
                &config.adam,
                &mut trainable.values,
                &g,
                &mut state,
                schedule.lr(step),
            )?;
            params.scatter(&trainable)?;
            step += 1;
        }
        let loss = mean_loss(model, &params, examples)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        let ckpt = Checkpoint {
            epoch,
            params: params.clone(),
            adam: state.clone(),
            avg_lr: schedule.epoch_avg_lr(epoch, steps_per_epoch)?,
        };
        on_epoch(&ckpt)?;
        run.checkpoints.push(ckpt);
        run.epoch_losses.push(loss);
    }
    run.final_params = params;
    Ok(run)
}

/// Seeded random subset of `ceil(fraction * n)` pool indices, ascending.
pub fn sample_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig("fraction must be in (0, 1]".into()));
    }
    let k = fraction_count(fraction, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = math::rng(math::sub_seed(seed, 0x5e1));
    let (chosen, _) = idx.partial_shuffle(&mut rng, k);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Warmup: train on a random `fraction` of the pool, one checkpoint per epoch.
pub fn warmup(
    model: &TinyLm,
    init: ParamVector,
    pool: &[Example],
    fraction: f64,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let subset: Vec<Example> = sample_subset(pool.len(), fraction, config.seed)?
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    train(model, init, &subset, config, |_| Ok(()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
}

/// Teacher-forced loss and token accuracy plus greedy exact-match accuracy.
pub fn evaluate(model: &TinyLm, params: &ParamVector, examples: &[Example]) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut m = EvalMetrics::default();
    for ex in examples {
        m.loss += model.loss(ex, params)?;
        m.token_accuracy += model.token_accuracy(ex, params)?;
        let decoded = model.greedy_decode(&ex.prompt, ex.completion.len(), params)?;
        if decoded == ex.completion {
            m.exact_match += 1.0;
        }
    }
    let n = examples.len() as f64;
    m.loss /= n;
    m.token_accuracy /= n;
    m.exact_match /= n;
    Ok(m)
}
