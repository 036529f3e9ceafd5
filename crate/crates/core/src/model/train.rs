//! Loss-masked training loop.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::forward::{target_rows, Gradients, Mode};
use super::ops::Scalar;
use super::optim::{Adafactor, OptimConfig, OptimizerState};
use super::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::tasks::TrainingExample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Write `step-<n>.ckpt` into `checkpoint_dir` every this many steps.
    pub checkpoint_every: Option<u64>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON step records.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            metrics_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub targets: usize,
}

pub struct TrainOutcome {
    pub model: Checkpoint,
    pub log: Vec<StepRecord>,
    pub optimizer: OptimizerState<f32>,
}

fn example_seed(seed: u64, step: u64, index: usize) -> u64 {
    let mut x = seed.wrapping_add(0x2545_f491_4f6c_dd1d);
    for v in [step, index as u64] {
        x = (x ^ v).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x ^= x >> 32;
    }
    x
}

/// One optimizer step on a batch; the loss is the mean over all target tokens.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Adafactor<T>,
    batch: &[TrainingExample],
    seed: u64,
) -> Result<StepRecord> {
    let step = opt.state.step + 1;
    let targets: usize = batch.iter().map(|e| target_rows(e).len()).sum();
    if targets == 0 {
        return Err(Error::EmptyMask);
    }
    let weight = T::of(1.0 / targets as f64);
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        total += model.accumulate_example(ex, Mode::Train, example_seed(seed, step, i), weight, &mut grads)?;
    }
    let loss = total / targets as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    let lr = opt.step(model, &grads);
    model.step += 1;
    Ok(StepRecord {
        step,
        loss,
        lr,
        targets,
    })
}

/// Trains all parameters for `cfg.steps` steps on batches drawn from `stream`.
pub fn train<I>(
    model: Checkpoint,
    stream: I,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome>
where
    I: IntoIterator<Item = TrainingExample>,
{
    let mut model = model;
    model.validate()?;
    let mut opt = Adafactor::new(cfg.optim.clone(), &model);
    let mut stream = stream.into_iter();
    let mut metrics = match &cfg.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let batch_size = cfg.batch_size.max(1);
    for _ in 0..cfg.steps {
        let batch: Vec<TrainingExample> = stream.by_ref().take(batch_size).collect();
        if batch.is_empty() {
            break;
        }
        let record = train_step(&mut model, &mut opt, &batch, cfg.seed)?;
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        on_step(&record);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && record.step % every == 0 {
                model.save(dir.join(format!("step-{}.ckpt", record.step)))?;
            }
        }
        log.push(record);
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(TrainOutcome {
        model,
        log,
        optimizer: opt.state,
    })
}
