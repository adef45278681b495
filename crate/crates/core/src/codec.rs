//! Per-frame convolutional autoencoder mapping clips to the latent space the
//! diffusion model works in.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::ops::{pixel_shuffle2, pixel_unshuffle2};
use crate::nn::{AdamW, AdamWConfig, Checkpoint, Conv3x3, Group, ParamStore};
use crate::seed;
use crate::synth::VideoClip;

pub const CHECKPOINT_KIND: &str = "codec";

/// Spatial downsample factor of the codec (two stride-2 stages).
pub const FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub seed: u64,
    pub steps: usize,
    /// Frames per optimiser step.
    pub batch: usize,
    pub lr: f64,
    /// Held-out reconstruction MSE a trained codec must reach; the default
    /// is 25 dB PSNR.
    pub max_heldout_mse: f64,
    /// Every `holdout_every`-th clip is held out.
    pub holdout_every: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [8, 24, 48],
            seed: 0,
            steps: 1200,
            batch: 12,
            lr: 2e-3,
            max_heldout_mse: 3.1622776601683795e-3,
            holdout_every: 10,
        }
    }
}

/// Per-frame latent maps of a clip at diffusion step `step`.
#[derive(Debug, Clone)]
pub struct LatentClip {
    /// `(N, h, w, c)`.
    pub latents: Tensor,
    pub step: usize,
    pub frame_rate: f64,
}

impl LatentClip {
    pub fn new(latents: Tensor, step: usize, frame_rate: f64) -> Result<Self> {
        latents.dims4()?;
        Ok(Self {
            latents,
            step,
            frame_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.latents.dims()[0]
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.latents.dims();
        (d[0], d[1], d[2], d[3])
    }
}

struct Encoder {
    convs: [Conv3x3; 4],
}

struct Decoder {
    convs: [Conv3x3; 4],
}

pub struct Codec {
    pub config: CodecConfig,
    /// Multiplier applied to raw encoder output so latents have unit scale.
    pub latent_scale: f64,
    store: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl Codec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        let [w0, w1, w2] = config.widths;
        let c = config.latent_channels;
        if c == 0 || config.widths.contains(&0) {
            return Err(Error::InvalidConfig("codec widths must be positive".into()));
        }
        let store = ParamStore::new(config.seed, DType::F32);
        let vb = store.root();
        // resolution changes go through space-to-depth / depth-to-space so
        // that no wide convolution runs at full resolution; edge padding keeps
        // flat frames flat
        let e = vb.pp("enc");
        let enc = Encoder {
            convs: [
                Conv3x3::new(&e.pp("c0"), 12, w1, 1)?.replicate(),
                Conv3x3::new(&e.pp("c1"), 4 * w1, w2, 1)?.replicate(),
                Conv3x3::new(&e.pp("c2"), w2, w2, 1)?.replicate(),
                Conv3x3::new(&e.pp("c3"), w2, c, 1)?.replicate(),
            ],
        };
        let d = vb.pp("dec");
        let dec = Decoder {
            convs: [
                Conv3x3::new(&d.pp("c0"), c, w2, 1)?.replicate(),
                Conv3x3::new(&d.pp("c1"), w2, 4 * w1, 1)?.replicate(),
                Conv3x3::new(&d.pp("c2"), w1, 4 * w0, 1)?.replicate(),
                Conv3x3::new(&d.pp("c3"), w0, 3, 1)?.replicate(),
            ],
        };
        Ok(Self {
            config,
            latent_scale: 1.0,
            store,
            enc,
            dec,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(1, N, H, W, 3)` pixels to raw `(1, N, H/4, W/4, c)` latents.
    fn encode_raw(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let [c0, c1, c2, c3] = &self.enc.convs;
        let h = c0.forward(&pixel_unshuffle2(x)?)?.silu()?;
        let h = c1.forward(&pixel_unshuffle2(&h)?)?.silu()?;
        let h = c2.forward(&h)?.silu()?;
        c3.forward(&h)
    }

    /// Raw latents to unclamped pixels.
    fn decode_raw(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let [c0, c1, c2, c3] = &self.dec.convs;
        let h = c0.forward(z)?.silu()?;
        let h = pixel_shuffle2(&c1.forward(&h)?)?.silu()?;
        let h = pixel_shuffle2(&c2.forward(&h)?)?.silu()?;
        c3.forward(&h)
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % FACTOR != 0 || w % FACTOR != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("frame dims divisible by {FACTOR}"),
                got: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    /// Deterministic encoding to a step-0 latent clip.
    pub fn encode(&self, clip: &VideoClip) -> Result<LatentClip> {
        let (n, h, w, c) = clip.dims();
        if c != 3 {
            return Err(invalid(format!("codec expects 3 channels, got {c}")));
        }
        self.check_dims(h, w)?;
        let mut parts = Vec::new();
        for start in (0..n).step_by(32) {
            let len = 32.min(n - start);
            let x = clip.frames_tensor(start, len, DType::F32)?.unsqueeze(0)?;
            // inference only: drop the autograd graph
            parts.push(self.encode_raw(&x)?.squeeze(0)?.detach());
        }
        let z = (Tensor::cat(&parts, 0)? * self.latent_scale)?;
        LatentClip::new(z, 0, clip.frame_rate())
    }

    /// Decodes a latent clip; pixels are clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentClip) -> Result<VideoClip> {
        let (n, h, w, c) = latent.dims();
        if c != self.config.latent_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} latent channels", self.config.latent_channels),
                got: c.to_string(),
            });
        }
        let z = (latent.latents.to_dtype(DType::F32)? / self.latent_scale)?;
        let mut parts = Vec::new();
        for start in (0..n).step_by(32) {
            let len = 32.min(n - start);
            let zi = z.narrow(0, start, len)?.unsqueeze(0)?;
            parts.push(self.decode_raw(&zi)?.squeeze(0)?.detach());
        }
        let x = Tensor::cat(&parts, 0)?;
        debug_assert_eq!(x.dims(), &[n, h * FACTOR, w * FACTOR, 3]);
        VideoClip::from_tensor(&x, latent.frame_rate)
    }

    /// Mean squared reconstruction error of `clip` (clamped output).
    pub fn reconstruction_mse(&self, clip: &VideoClip) -> Result<f64> {
        let rec = self.decode(&self.encode(clip)?)?;
        let se: f64 = clip
            .data()
            .iter()
            .zip(rec.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(se / clip.data().len() as f64)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::json!({
            "config": self.config,
            "latent_scale": self.latent_scale,
            "factor": FACTOR,
        });
        Ok(Checkpoint::new(CHECKPOINT_KIND, header, self.store.snapshot()?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let ck = ck.clone().expect_kind(CHECKPOINT_KIND)?;
        if ck.header["factor"].as_u64() != Some(FACTOR as u64) {
            return Err(Error::Checkpoint(format!("unsupported codec factor {}", ck.header["factor"])));
        }
        let config: CodecConfig = serde_json::from_value(ck.header["config"].clone())?;
        let mut codec = Codec::new(config)?;
        codec.latent_scale = ck.header["latent_scale"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("missing latent_scale".into()))?;
        if ck.tensors.len() != codec.store.len() {
            return Err(Error::Checkpoint(format!(
                "codec checkpoint has {} tensors, model has {}",
                ck.tensors.len(),
                codec.store.len()
            )));
        }
        codec.store.load(&ck.tensors, |_| Group::Base)?;
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CodecTrainReport {
    /// `(step, training loss)` for every step.
    pub curve: Vec<(usize, f64)>,
    pub heldout_mse: f64,
    pub heldout_psnr: f64,
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Trains a codec on the frames of `corpus`. Every `holdout_every`-th clip is
/// kept out of training and used for the convergence check.
pub fn train_codec(corpus: &[VideoClip], config: CodecConfig) -> Result<(Codec, CodecTrainReport)> {
    if corpus.is_empty() {
        return Err(invalid("codec training corpus is empty"));
    }
    let every = config.holdout_every.max(2);
    let (mut train, mut held): (Vec<&VideoClip>, Vec<&VideoClip>) = (Vec::new(), Vec::new());
    for (i, c) in corpus.iter().enumerate() {
        if corpus.len() > 1 && i % every == every - 1 {
            held.push(c);
        } else {
            train.push(c);
        }
    }
    if held.is_empty() {
        held.push(corpus.last().unwrap());
    }
    let (_, h, w, _) = train[0].dims();
    let mut codec = Codec::new(config.clone())?;
    codec.check_dims(h, w)?;
    if train.iter().any(|c| c.height() != h || c.width() != w || c.channels() != 3) {
        return Err(invalid("codec corpus clips must share 3-channel frame dims"));
    }

    let mut opt = AdamW::new(
        codec.store.trainable(),
        AdamWConfig {
            lr: config.lr,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            ..AdamWConfig::default()
        },
    )?;
    let frames: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames()).map(move |t| (ci, t)))
        .collect();
    let frame_len = h * w * 3;
    let mut report = CodecTrainReport::default();
    for step in 0..config.steps {
        let mut rng = seed::rng(config.seed, "codec-batch", step as u64);
        let mut buf = Vec::with_capacity(config.batch * frame_len);
        for _ in 0..config.batch {
            // occasional flat frames keep uniform inputs in range
            if rng.random_bool(1.0 / 6.0) {
                let rgb: [f32; 3] = [rng.random(), rng.random(), rng.random()];
                buf.extend((0..h * w).flat_map(|_| rgb));
            } else {
                let (ci, t) = frames[rng.random_range(0..frames.len())];
                buf.extend_from_slice(train[ci].frame(t));
            }
        }
        let x = Tensor::from_vec(buf, (1, config.batch, h, w, 3), &Device::Cpu)?;
        let rec = codec.decode_raw(&codec.encode_raw(&x)?)?;
        let loss = (rec - &x)?.sqr()?.mean_all()?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good_step: step.saturating_sub(1),
            });
        }
        opt.step(&loss.backward()?)?;
        report.curve.push((step, value));
        if step % 100 == 0 {
            log::info!("codec step {step}: mse {value:.5}");
        }
    }

    codec.latent_scale = latent_scale(&codec, &train)?;
    let mut se = 0.0;
    for c in &held {
        se += codec.reconstruction_mse(c)?;
    }
    report.heldout_mse = se / held.len() as f64;
    report.heldout_psnr = psnr(report.heldout_mse);
    if config.steps > 0 && report.heldout_mse > config.max_heldout_mse {
        return Err(Error::NotConverged {
            final_loss: report.heldout_mse,
            threshold: config.max_heldout_mse,
        });
    }
    Ok((codec, report))
}

/// `1 / std` of raw latents over a sample of training frames.
fn latent_scale(codec: &Codec, clips: &[&VideoClip]) -> Result<f64> {
    let mut parts = Vec::new();
    for c in clips.iter().step_by((clips.len() / 8).max(1)).take(8) {
        let len = c.frames().min(8);
        let x = c.frames_tensor(0, len, DType::F32)?.unsqueeze(0)?;
        parts.push(codec.encode_raw(&x)?.flatten_all()?);
    }
    let z = Tensor::cat(&parts, 0)?.to_dtype(DType::F64)?;
    let mean = z.mean_all()?.to_scalar::<f64>()?;
    let var = (z - mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    let std = var.sqrt();
    Ok(if std > 1e-8 { 1.0 / std } else { 1.0 })
}
