//! Supervised training on phantom clips.

pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{track_on_tape, ModelConfig};
use crate::params::ModelParams;
use crate::phantom::{generate, PhantomSample, PhantomSpec};
use crate::tensor::{Tape, Tensor};

pub use loss::{iteration_weights, trajectory_loss, weight_sum};
pub use optim::{optimizer_step, OneCycle, OptimState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Exponential iteration weighting factor, in (0, 1].
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Clip length per sample; 0 keeps the phantom default.
    pub clip_frames: usize,
    /// Query points per sample; 0 keeps the phantom default.
    pub points_per_sample: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Forces sequential kernels and fixed accumulation order.
    pub deterministic: bool,
    /// Simple flip/intensity-jitter augmentation (a minimal stand-in; makes
    /// no claim of matching any published augmentation scheme).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            gamma: 0.8,
            epochs: 10,
            batch_size: 4,
            clip_frames: 0,
            points_per_sample: 0,
            weight_decay: 1e-4,
            seed: 0,
            deterministic: true,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train: gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("train: learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train: batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub steps: u64,
}

fn horizontal_flip(sample: &PhantomSample<f32>) -> PhantomSample<f32> {
    let (t_len, h, w) = (
        sample.video.shape()[0],
        sample.video.shape()[1],
        sample.video.shape()[2],
    );
    let video = Tensor::from_fn(&[t_len, h, w, 1], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let t = i / (w * h);
        sample.video.at(&[t, y, w - 1 - x, 0])
    });
    let flip_x = |pos: &Tensor<f32>| {
        Tensor::from_fn(pos.shape(), |i| {
            if i % 2 == 0 {
                (w - 1) as f32 - pos.data()[i]
            } else {
                pos.data()[i]
            }
        })
    };
    let mut out = sample.clone();
    out.video = video;
    out.gt.positions = flip_x(&sample.gt.positions);
    out.gt.queries = flip_x(&sample.gt.queries);
    out
}

fn jitter_intensity(sample: &PhantomSample<f32>, factor: f32) -> PhantomSample<f32> {
    let mut out = sample.clone();
    out.video = sample.video.map(move |v| (v * factor).clamp(0.0, 1.0));
    out
}

/// One forward/backward pass; returns the loss value and per-parameter
/// gradients aligned with `params`.
fn sample_pass(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    sample: &PhantomSample<f32>,
    gamma: f64,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let video = tape.constant(sample.video.clone());
    let out = track_on_tape(
        &mut tape,
        video,
        &sample.gt.queries,
        sample.gt.query_frame,
        cfg,
        &bound,
    )?;
    let gt = tape.constant(sample.gt.positions.clone());
    let loss = trajectory_loss(&mut tape, &out.states[1..], gt, gamma)?;
    let loss_value = tape.value(loss).item() as f64;
    let mut grads = tape.backward(loss)?;
    let per_param = (0..params.len())
        .map(|i| grads.take(bound.var_at(i)))
        .collect();
    Ok((loss_value, per_param))
}

/// Train on `sample_count` freshly generated phantom clips. Parameters and
/// optimizer state are updated in place so runs can resume.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    phantom_spec: &PhantomSpec,
    sample_count: usize,
    params: &mut ModelParams<f32>,
    opt_state: &mut OptimState<f32>,
) -> Result<TrainReport> {
    let mut spec = phantom_spec.clone();
    if train_cfg.clip_frames > 0 {
        spec.frames = train_cfg.clip_frames;
    }
    if train_cfg.points_per_sample > 0 {
        spec.points = train_cfg.points_per_sample;
    }
    spec.validate()?;
    let samples: Vec<PhantomSample<f32>> = crate::exec::map_collect(sample_count, |i| {
        generate::<f32>(&spec, spec.seed.wrapping_add(i as u64))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    train_on_samples(model_cfg, train_cfg, &samples, params, opt_state)
}

/// Train on an already materialized clip set.
pub fn train_on_samples(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    samples: &[PhantomSample<f32>],
    params: &mut ModelParams<f32>,
    opt_state: &mut OptimState<f32>,
) -> Result<TrainReport> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if samples.len() < train_cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "sample count {} below batch size {}",
            samples.len(),
            train_cfg.batch_size
        )));
    }
    let was_sequential = crate::exec::sequential_forced();
    if train_cfg.deterministic {
        crate::exec::set_sequential(true);
    }
    let result = train_inner(model_cfg, train_cfg, samples, params, opt_state);
    crate::exec::set_sequential(was_sequential);
    result
}

fn train_inner(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    samples: &[PhantomSample<f32>],
    params: &mut ModelParams<f32>,
    opt_state: &mut OptimState<f32>,
) -> Result<TrainReport> {
    let sample_count = samples.len();
    let batches_per_epoch = sample_count / train_cfg.batch_size;
    let total_steps = train_cfg.epochs * batches_per_epoch;
    let schedule = OneCycle {
        base_lr: train_cfg.learning_rate,
        total_steps,
    };

    let mut report = TrainReport::default();
    let mut initial_loss: Option<f64> = None;
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..sample_count).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(train_cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)));
        order.shuffle(&mut epoch_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_terms = 0usize;
        for batch in order.chunks(train_cfg.batch_size).take(batches_per_epoch) {
            let mut batch_loss = 0.0;
            let mut grads: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
            for &idx in batch {
                let sample = if train_cfg.augment {
                    let mut s = samples[idx].clone();
                    if epoch_rng.random_bool(0.5) {
                        s = horizontal_flip(&s);
                    }
                    let f = epoch_rng.random_range(0.9..1.1);
                    jitter_intensity(&s, f)
                } else {
                    samples[idx].clone()
                };
                let (loss, sample_grads) = sample_pass(model_cfg, params, &sample, train_cfg.gamma)?;
                if !loss.is_finite() {
                    return Err(Error::NanGradient {
                        param: "loss".into(),
                    });
                }
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    if let Some(g) = g {
                        *acc = Some(match acc.take() {
                            None => g,
                            Some(a) => {
                                Tensor::new(
                                    a.shape().to_vec(),
                                    a.data().iter().zip(g.data()).map(|(x, y)| x + y).collect(),
                                )?
                            }
                        });
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut().flatten() {
                *g = g.map(|v| v * inv);
            }
            batch_loss /= batch.len() as f64;

            let initial = *initial_loss.get_or_insert(batch_loss);
            if initial > 0.0 && batch_loss > 10.0 * initial {
                return Err(Error::Diverged {
                    loss: batch_loss,
                    initial,
                });
            }
            let lr = schedule.lr_at(opt_state.step as usize);
            optimizer_step(params, &grads, opt_state, lr, train_cfg.weight_decay)?;
            epoch_loss += batch_loss;
            epoch_terms += 1;
            report.steps += 1;
        }
        report.loss_curve.push(epoch_loss / epoch_terms.max(1) as f64);
        let _ = epoch;
    }
    Ok(report)
}
