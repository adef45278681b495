//! Deterministic strided reverse sampling and clip-to-clip generation.

use candle_core::{DType, Tensor};

use super::schedule::NoiseSchedule;
use super::unet::AvdModel;
use crate::codec::{Codec, LatentClip};
use crate::error::{bad_config, invalid, Error, Result};
use crate::seed;
use crate::synth::{TextPrompt, VideoClip};

/// Noise predictor `(Z_k, k) -> eps_hat` for a batch of latents.
pub type Predictor<'a> = dyn FnMut(&Tensor, usize) -> Result<Tensor> + 'a;

/// Reverse steps `K, K-m, K-2m, ...` down to the last positive one.
pub fn ddim_steps(k_total: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > k_total {
        return Err(bad_config(format!("step interval {m} outside [1, {k_total}]")));
    }
    Ok((0..).map(|i| k_total as isize - (i * m) as isize).take_while(|k| *k >= 1).map(|k| k as usize).collect())
}

/// Noises `z0` to step K with `eps` and runs the strided deterministic
/// reverse chain, each step jumping from `k` to `max(k - m, 0)`.
pub fn ddim_reverse(
    z0: &Tensor,
    eps: &Tensor,
    sched: &NoiseSchedule,
    m: usize,
    predictor: &mut Predictor<'_>,
) -> Result<Tensor> {
    ddim_reverse_from(z0, eps, sched, sched.steps(), m, predictor)
}

/// [`ddim_reverse`] starting at step `start <= K` instead of K.
pub fn ddim_reverse_from(
    z0: &Tensor,
    eps: &Tensor,
    sched: &NoiseSchedule,
    start: usize,
    m: usize,
    predictor: &mut Predictor<'_>,
) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z0.dims()),
            got: format!("{:?}", eps.dims()),
        });
    }
    if start == 0 || start > sched.steps() {
        return Err(bad_config(format!("start step {start} outside [1, {}]", sched.steps())));
    }
    let steps = ddim_steps(start, m)?;
    let ab = sched.alpha_bar(start);
    let mut z = ((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
    for k in steps {
        let prev = k.saturating_sub(m);
        let eps_hat = predictor(&z, k)?;
        z = ddim_step(&z, &eps_hat, sched.alpha_bar(k), sched.alpha_bar(prev))?;
    }
    Ok(z)
}

/// Reverse-chain controls for clip generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    /// Step interval m.
    pub interval: usize,
    /// Step the anchor latent is noised to; `None` is the full depth K.
    pub start: Option<usize>,
    /// Weight `w` in `eps(contrast) + w (eps(prompt) - eps(contrast))`;
    /// 1 uses the prompt alone.
    pub guidance: f64,
}

impl SamplerOptions {
    pub fn plain(interval: usize) -> Self {
        Self {
            interval,
            start: None,
            guidance: 1.0,
        }
    }
}

/// One reverse step between cumulative coefficients `ab_k` and `ab_prev`.
pub fn ddim_step(z: &Tensor, eps_hat: &Tensor, ab_k: f64, ab_prev: f64) -> Result<Tensor> {
    let x0 = ((z - (eps_hat * (1.0 - ab_k).sqrt())?)? / ab_k.sqrt())?;
    Ok(((x0 * ab_prev.sqrt())? + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
}

fn initial_noise(shape: &[usize], seed: u64) -> Result<Tensor> {
    Ok(seed::normal_tensor(&mut seed::rng(seed, "ddim-init", 0), shape, DType::F32)?)
}

/// Encodes the anchor, runs the reverse chain with `predictor` from seeded
/// initial noise, and decodes.
pub fn generate_with(
    codec: &Codec,
    anchor: &VideoClip,
    sched: &NoiseSchedule,
    m: usize,
    seed: u64,
    predictor: &mut Predictor<'_>,
) -> Result<VideoClip> {
    let z0 = codec.encode(anchor)?;
    let lat = z0.latents.unsqueeze(0)?;
    let eps = initial_noise(lat.dims(), seed)?;
    let z = ddim_reverse(&lat, &eps, sched, m, predictor)?;
    codec.decode(&LatentClip::new(z.squeeze(0)?, 0, anchor.frame_rate())?)
}

/// Rewrites each anchor under its prompt in one batched reverse chain.
/// Sample `i` starts from noise seeded by `seeds[i]` and is steered away
/// from `contrasts[i]` when `opts.guidance != 1`.
#[allow(clippy::too_many_arguments)]
pub fn generate_variants(
    model: &AvdModel,
    codec: &Codec,
    anchors: &[&VideoClip],
    prompts: &[&TextPrompt],
    contrasts: &[&TextPrompt],
    seeds: &[u64],
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<Vec<VideoClip>> {
    let b = anchors.len();
    if b == 0 || prompts.len() != b || contrasts.len() != b || seeds.len() != b {
        return Err(invalid("generate_variants needs equally many anchors, prompts, contrasts and seeds"));
    }
    let latents = anchors.iter().map(|a| Ok(codec.encode(a)?.latents)).collect::<Result<Vec<_>>>()?;
    let z0 = Tensor::stack(&latents, 0)?;
    let noise = seeds
        .iter()
        .map(|s| initial_noise(&z0.dims()[1..], *s))
        .collect::<Result<Vec<_>>>()?;
    let eps = Tensor::stack(&noise, 0)?;
    let w = opts.guidance;
    let guided = w != 1.0;
    let text = if guided {
        model.embed_prompts(&[prompts, contrasts].concat())?
    } else {
        model.embed_prompts(prompts)?
    }
    .detach();
    let mut pred = |z: &Tensor, k: usize| -> Result<Tensor> {
        if !guided {
            return Ok(model.predict_noise(z, &vec![k; b], &text)?.detach());
        }
        let both = model.predict_noise(&Tensor::cat(&[z, z], 0)?, &vec![k; 2 * b], &text)?.detach();
        let (own, other) = (both.narrow(0, 0, b)?, both.narrow(0, b, b)?);
        Ok((&other + ((own - &other)? * w)?)?)
    };
    let start = opts.start.unwrap_or(sched.steps());
    let z = ddim_reverse_from(&z0, &eps, sched, start, opts.interval, &mut pred)?;
    (0..b)
        .map(|i| codec.decode(&LatentClip::new(z.get(i)?, 0, anchors[i].frame_rate())?))
        .collect()
}

/// Single-clip form of [`generate_variants`] without a contrast prompt; the
/// output has the anchor's dimensions.
pub fn generate_variant(
    model: &AvdModel,
    codec: &Codec,
    anchor: &VideoClip,
    prompt: &TextPrompt,
    seed: u64,
    sched: &NoiseSchedule,
    opts: &SamplerOptions,
) -> Result<VideoClip> {
    let opts = SamplerOptions { guidance: 1.0, ..*opts };
    Ok(generate_variants(model, codec, &[anchor], &[prompt], &[prompt], &[seed], sched, &opts)?.remove(0))
}
