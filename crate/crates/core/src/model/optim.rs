//! Adafactor: adaptive updates from a factored second-moment estimate.
//!
//! For a matrix parameter only row and column means of the squared gradient
//! are kept; the second moment is rebuilt as their outer product divided by
//! the mean of the row statistics. Vectors keep a full estimate. Updates
//! are RMS-clipped before scaling by the learning rate.

use serde::{Deserialize, Serialize};

use super::ops::Scalar;
use super::{Gradients, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up to `peak`, then exponential decay towards `floor`.
    RampExpDecay {
        peak: f64,
        warmup_steps: u64,
        floor: f64,
        half_life: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Rate of the constant schedule.
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Exponent in `beta2_t = 1 - t^decay`.
    pub decay: f64,
    pub eps: f64,
    pub clip_threshold: f64,
    /// Optional first-moment smoothing; `None` disables momentum.
    pub beta1: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            schedule: LrSchedule::Constant,
            decay: -0.8,
            eps: 1e-30,
            clip_threshold: 1.0,
            beta1: None,
        }
    }
}

impl OptimConfig {
    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match &self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::RampExpDecay {
                peak,
                warmup_steps,
                floor,
                half_life,
            } => {
                if t <= *warmup_steps {
                    peak * t as f64 / (*warmup_steps).max(1) as f64
                } else {
                    let k = (t - warmup_steps) as f64 / (*half_life).max(1) as f64;
                    floor + (peak - floor) * 0.5f64.powf(k)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Moment<T> {
    Factored { rows: Vec<T>, cols: Vec<T> },
    Full(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub moments: Vec<Moment<T>>,
    pub momentum: Option<Vec<Vec<T>>>,
    pub step: u64,
}

pub struct Adafactor<T> {
    pub config: OptimConfig,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Adafactor<T> {
    pub fn new(config: OptimConfig, model: &Model<T>) -> Self {
        let moments = model
            .tensors
            .iter()
            .map(|t| match t.shape.as_slice() {
                [r, c] => Moment::Factored {
                    rows: vec![T::zero(); *r],
                    cols: vec![T::zero(); *c],
                },
                _ => Moment::Full(vec![T::zero(); t.data.len()]),
            })
            .collect();
        let momentum = config
            .beta1
            .map(|_| model.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect());
        Self {
            config,
            state: OptimizerState {
                moments,
                momentum,
                step: 0,
            },
        }
    }

    /// Applies one update; returns the learning rate used.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Gradients<T>) -> f64 {
        self.state.step += 1;
        let t = self.state.step;
        let lr = self.config.lr_at(t);
        let beta2 = T::of(1.0 - (t as f64).powf(self.config.decay));
        let one_minus = T::one() - beta2;
        let eps = T::of(self.config.eps);
        let clip = T::of(self.config.clip_threshold);

        for (i, (tensor, g)) in model.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let mut update: Vec<T> = match &mut self.state.moments[i] {
                Moment::Factored { rows, cols } => {
                    let (nr, nc) = (rows.len(), cols.len());
                    let mut row_mean = vec![T::zero(); nr];
                    let mut col_mean = vec![T::zero(); nc];
                    for r in 0..nr {
                        for c in 0..nc {
                            let sq = g[r * nc + c] * g[r * nc + c] + eps;
                            row_mean[r] += sq;
                            col_mean[c] += sq;
                        }
                    }
                    let (inv_c, inv_r) = (T::one() / T::of(nc as f64), T::one() / T::of(nr as f64));
                    for (acc, s) in rows.iter_mut().zip(&row_mean) {
                        *acc = beta2 * *acc + one_minus * *s * inv_c;
                    }
                    for (acc, s) in cols.iter_mut().zip(&col_mean) {
                        *acc = beta2 * *acc + one_minus * *s * inv_r;
                    }
                    let mean_row = rows.iter().copied().sum::<T>() * inv_r;
                    let mut u = vec![T::zero(); nr * nc];
                    for r in 0..nr {
                        for c in 0..nc {
                            let gi = g[r * nc + c];
                            if gi != T::zero() {
                                let v = rows[r] * cols[c] / mean_row;
                                u[r * nc + c] = gi / v.sqrt();
                            }
                        }
                    }
                    u
                }
                Moment::Full(v) => v
                    .iter_mut()
                    .zip(g)
                    .map(|(acc, &gi)| {
                        *acc = beta2 * *acc + one_minus * (gi * gi + eps);
                        if gi == T::zero() {
                            T::zero()
                        } else {
                            gi / acc.sqrt()
                        }
                    })
                    .collect(),
            };
            let rms = (update.iter().map(|&u| u * u).sum::<T>() / T::of(update.len() as f64)).sqrt();
            let denom = T::one().max(rms / clip);
            update.iter_mut().for_each(|u| *u = *u / denom);
            if let (Some(beta1), Some(mom)) = (self.config.beta1, self.state.momentum.as_mut()) {
                let b1 = T::of(beta1);
                for (m, u) in mom[i].iter_mut().zip(update.iter_mut()) {
                    *m = b1 * *m + (T::one() - b1) * *u;
                    *u = *m;
                }
            }
            let lr_t = T::of(lr);
            for (p, u) in tensor.data.iter_mut().zip(&update) {
                *p -= lr_t * *u;
            }
        }
        lr
    }
}
