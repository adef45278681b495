//! Noise-prediction training of the U-Net and prompt encoder.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{noise_tensor, NoiseSchedule};
use super::unet::AvdModel;
use crate::codec::Codec;
use crate::error::{bad_config, invalid, Error, Result};
use crate::nn::checkpoint::NamedTensor;
use crate::nn::{AdamW, AdamWConfig};
use crate::seed;
use crate::synth::{TextPrompt, VideoClip};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvdTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Train only adapter parameters.
    pub frozen_base: bool,
}

impl Default for AvdTrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 2,
            lr: 5e-6,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            seed: 0,
            frozen_base: false,
        }
    }
}

/// One training pair, already in latent space: `(N, h, w, c)`.
#[derive(Debug, Clone)]
pub struct AvdSample {
    pub latents: Tensor,
    pub prompt: TextPrompt,
}

pub fn encode_corpus(codec: &Codec, pairs: &[(VideoClip, TextPrompt)]) -> Result<Vec<AvdSample>> {
    pairs
        .iter()
        .map(|(clip, prompt)| {
            Ok(AvdSample {
                latents: codec.encode(clip)?.latents,
                prompt: prompt.clone(),
            })
        })
        .collect()
}

/// Optimiser position that lets a run continue where it stopped.
#[derive(Debug, Clone, Default)]
pub struct AvdTrainState {
    pub step: usize,
    pub optimizer: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvdStepLog {
    pub step: usize,
    pub loss: f64,
}

/// Mean squared noise-prediction error for one batch of samples, steps and
/// noise draws.
pub fn diffusion_loss(
    model: &AvdModel,
    sched: &NoiseSchedule,
    batch: &[&AvdSample],
    steps: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let noisy = batch
        .iter()
        .zip(steps)
        .enumerate()
        .map(|(i, (s, k))| noise_tensor(&s.latents, *k, &eps.get(i)?, sched))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let zk = Tensor::stack(&noisy, 0)?;
    let prompts: Vec<&TextPrompt> = batch.iter().map(|s| &s.prompt).collect();
    let text = model.embed_prompts(&prompts)?;
    let pred = model.predict_noise(&zk, steps, &text)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Runs `config.steps - state.step` optimiser steps. Step `s` draws its
/// batch, diffusion steps and noise from `(seed, s)` alone, so a resumed run
/// repeats an uninterrupted one.
pub fn train_avd(
    model: &AvdModel,
    samples: &[AvdSample],
    sched: &NoiseSchedule,
    config: &AvdTrainConfig,
    state: AvdTrainState,
    mut on_step: impl FnMut(&AvdStepLog),
) -> Result<(AvdTrainState, Vec<AvdStepLog>)> {
    if samples.is_empty() {
        return Err(invalid("empty diffusion training corpus"));
    }
    if config.batch == 0 {
        return Err(bad_config("batch must be positive"));
    }
    let frames = samples[0].latents.dims().to_vec();
    if let Some(s) = samples.iter().find(|s| s.latents.dims() != frames.as_slice()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{frames:?}"),
            got: format!("{:?}", s.latents.dims()),
        });
    }
    if config.frozen_base != model.store().frozen_base() {
        return Err(bad_config("model was not built in the requested frozen-base mode"));
    }
    let mut opt = AdamW::new(
        model.store().trainable(),
        AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            clip_norm: config.clip_norm,
            ..AdamWConfig::default()
        },
    )?;
    if state.step > 0 {
        opt.load_state(state.step, &state.optimizer)?;
    }
    let mut logs = Vec::new();
    for step in state.step..config.steps {
        let mut rng = seed::rng(config.seed, "avd-step", step as u64);
        let batch: Vec<&AvdSample> = (0..config.batch).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
        let ks: Vec<usize> = (0..config.batch).map(|_| rng.random_range(1..=sched.steps())).collect();
        let mut shape = vec![config.batch];
        shape.extend_from_slice(&frames);
        let eps = seed::normal_tensor(&mut rng, shape, DType::F32)?;
        let loss = diffusion_loss(model, sched, &batch, &ks, &eps)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good_step: step.saturating_sub(1),
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads)?;
        let log = AvdStepLog { step, loss: value };
        on_step(&log);
        logs.push(log);
    }
    Ok((
        AvdTrainState {
            step: opt.steps_taken().max(state.step),
            optimizer: opt.state()?,
        },
        logs,
    ))
}
