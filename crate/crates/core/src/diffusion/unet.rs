//! The text-conditioned denoising U-Net and the model wrapper that owns its
//! parameters, the prompt encoder and the checkpoint format.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blocks::{BlockDims, CrossAttnBlock};
use super::text::{TextEncoder, Vocab, TEXT_TOKENS};
use crate::error::{bad_config, Error, Result};
use crate::nn::checkpoint::NamedTensor;
use crate::nn::ops::{pixel_shuffle2, pixel_unshuffle2, sinusoidal_embedding};
use crate::nn::{Checkpoint, Conv3x3, Group, GroupNorm, Init, Linear, ParamStore, Vb};
use crate::synth::{PromptPool, TextPrompt};

pub const CHECKPOINT_KIND: &str = "avd";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Channel widths of the three resolution levels.
    pub widths: [usize; 3],
    pub head_dim: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub text_width: usize,
    pub text_tokens: usize,
    /// LoRA rank on every attention projection; 0 disables adapters.
    pub lora_rank: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: [16, 32, 32],
            head_dim: 8,
            groups: 4,
            time_dim: 64,
            text_width: 64,
            text_tokens: TEXT_TOKENS,
            lora_rank: 0,
        }
    }
}

/// Three encoder and three decoder cross-attention blocks with skips at
/// matching resolutions. Downsampling is space-to-depth plus a 1x1
/// projection; upsampling the reverse.
struct UNet {
    cfg: UNetConfig,
    conv_in: Conv3x3,
    time1: Linear,
    time2: Linear,
    enc: Vec<CrossAttnBlock>,
    down: Vec<Linear>,
    dec: Vec<CrossAttnBlock>,
    up: Vec<Linear>,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
}

impl UNet {
    fn new(vb: &Vb, cfg: &UNetConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        if cfg.time_dim % 2 != 0 {
            return Err(bad_config("time embedding width must be even"));
        }
        let dims = |c_in, c_out| BlockDims {
            c_in,
            c_out,
            text_width: cfg.text_width,
            time_dim: cfg.time_dim,
            head_dim: cfg.head_dim,
            groups: cfg.groups,
            lora: cfg.lora_rank,
        };
        let enc = vec![
            CrossAttnBlock::new(&vb.pp("enc0"), dims(w0, w0))?,
            CrossAttnBlock::new(&vb.pp("enc1"), dims(w0, w1))?,
            CrossAttnBlock::new(&vb.pp("enc2"), dims(w1, w2))?,
        ];
        let down = vec![
            Linear::new(&vb.pp("down0"), 4 * w0, w0)?,
            Linear::new(&vb.pp("down1"), 4 * w1, w1)?,
        ];
        let dec = vec![
            CrossAttnBlock::new(&vb.pp("dec0"), dims(w1 + w0, w0))?,
            CrossAttnBlock::new(&vb.pp("dec1"), dims(w2 + w1, w1))?,
            CrossAttnBlock::new(&vb.pp("dec2"), dims(w2 + w1, w2))?,
        ];
        let up = vec![
            Linear::new(&vb.pp("up0"), w1, 4 * w1)?,
            Linear::new(&vb.pp("up1"), w2, 4 * w2)?,
        ];
        Ok(Self {
            conv_in: Conv3x3::new(&vb.pp("conv_in"), cfg.latent_channels, w0, 1)?,
            time1: Linear::new(&vb.pp("time1"), cfg.time_dim, cfg.time_dim)?,
            time2: Linear::new(&vb.pp("time2"), cfg.time_dim, cfg.time_dim)?,
            enc,
            down,
            dec,
            up,
            norm_out: GroupNorm::new(&vb.pp("norm_out"), cfg.groups, w0)?,
            conv_out: Conv3x3::with_init(&vb.pp("conv_out"), w0, cfg.latent_channels, 1, Init::Zeros)?,
            cfg: cfg.clone(),
        })
    }

    fn time_embedding(&self, steps: &[usize], dtype: DType) -> candle_core::Result<Tensor> {
        let d = self.cfg.time_dim;
        let flat: Vec<f64> = steps.iter().flat_map(|k| sinusoidal_embedding(*k as f64, d)).collect();
        let e = Tensor::from_vec(flat, (steps.len(), d), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)?.silu()
    }

    fn forward(&self, z: &Tensor, steps: &[usize], text: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, h, w, c) = z.dims5()?;
        if steps.len() != b || c != self.cfg.latent_channels || h % 4 != 0 || w % 4 != 0 {
            candle_core::bail!("u-net input {:?} with {} steps does not match config", z.dims(), steps.len());
        }
        let temb = self.time_embedding(steps, z.dtype())?;
        let x = self.conv_in.forward(z)?;
        let e0 = self.enc[0].forward(&x, text, &temb)?;
        let d0 = self.down[0].forward(&pixel_unshuffle2(&e0)?)?;
        let e1 = self.enc[1].forward(&d0, text, &temb)?;
        let d1 = self.down[1].forward(&pixel_unshuffle2(&e1)?)?;
        let e2 = self.enc[2].forward(&d1, text, &temb)?;

        let y = self.dec[2].forward(&Tensor::cat(&[&e2, &d1], 4)?, text, &temb)?;
        let y = pixel_shuffle2(&self.up[1].forward(&y)?)?;
        let y = self.dec[1].forward(&Tensor::cat(&[&y, &e1], 4)?, text, &temb)?;
        let y = pixel_shuffle2(&self.up[0].forward(&y)?)?;
        let y = self.dec[0].forward(&Tensor::cat(&[&y, &e0], 4)?, text, &temb)?;

        let c0 = y.dim(4)?;
        let n = self.norm_out.forward(&y.reshape((b, t * h * w, c0))?)?;
        self.conv_out.forward(&n.reshape((b, t, h, w, c0))?.silu()?)
    }
}

/// U-Net plus prompt encoder over one parameter store.
pub struct AvdModel {
    store: ParamStore,
    pub config: UNetConfig,
    pub pool: PromptPool,
    text: TextEncoder,
    unet: UNet,
}

impl AvdModel {
    pub fn new(config: UNetConfig, pool: PromptPool, seed: u64) -> Result<Self> {
        Self::with_dtype(config, pool, seed, DType::F32)
    }

    /// `new` with parameters of `dtype`; checkpoints always hold `f32`.
    pub fn with_dtype(config: UNetConfig, pool: PromptPool, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(ParamStore::new(seed, dtype), config, pool)
    }

    fn build(store: ParamStore, config: UNetConfig, pool: PromptPool) -> Result<Self> {
        let vb = store.root();
        let text = TextEncoder::new(&vb.pp("text"), Vocab::from_pool(&pool), config.text_width, config.text_tokens)?;
        let unet = UNet::new(&vb.pp("unet"), &config)?;
        Ok(Self { store, config, pool, text, unet })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(l, c_text)` prompt embedding.
    pub fn embed_prompt(&self, prompt: &TextPrompt) -> Result<Tensor> {
        self.text.embed(prompt)
    }

    /// `(b, l, c_text)` embeddings of a batch of prompts.
    pub fn embed_prompts(&self, prompts: &[&TextPrompt]) -> Result<Tensor> {
        let rows = prompts.iter().map(|p| self.embed_prompt(p)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// Noise prediction for latents `z: (b, t, h, w, c)` at per-sample steps.
    pub fn predict_noise(&self, z: &Tensor, steps: &[usize], text: &Tensor) -> Result<Tensor> {
        Ok(self.unet.forward(z, steps, text)?)
    }

    /// SHA-256 over the names and values of every base-group parameter.
    pub fn base_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, dims, data) in self.store.snapshot()? {
            if self.store.group_of(&name) != Some(Group::Base) {
                continue;
            }
            h.update(name.as_bytes());
            for d in dims {
                h.update((d as u64).to_le_bytes());
            }
            for v in data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value, extra_tensors: Vec<NamedTensor>) -> Result<Checkpoint> {
        let mut tensors: Vec<NamedTensor> = self
            .store
            .snapshot()?
            .into_iter()
            .map(|(n, d, v)| (format!("param.{n}"), d, v))
            .collect();
        tensors.extend(extra_tensors);
        let header = serde_json::json!({
            "unet": self.config,
            "pool": self.pool,
            "base_hash": self.base_hash()?,
            "extra": extra,
        });
        Ok(Checkpoint::new(CHECKPOINT_KIND, header, tensors))
    }

    /// Rebuilds a model from a checkpoint. With `lora_rank = Some(r)` the
    /// stored base weights are frozen and fresh rank-`r` adapters are added.
    pub fn from_checkpoint(ck: &Checkpoint, lora_rank: Option<usize>) -> Result<Self> {
        let mut config: UNetConfig = serde_json::from_value(ck.header["unet"].clone())?;
        let pool: PromptPool = serde_json::from_value(ck.header["pool"].clone())?;
        let params = ck.section("param.");
        let is_adapter = |n: &str| n.contains("lora_");
        let mut store = ParamStore::new(0, DType::F32);
        store.load(&params, |n| if is_adapter(n) { Group::Adapter } else { Group::Base })?;
        if let Some(r) = lora_rank {
            if config.lora_rank != 0 && config.lora_rank != r {
                return Err(bad_config(format!("checkpoint already carries rank-{} adapters", config.lora_rank)));
            }
            config.lora_rank = r;
            store.set_frozen_base(true);
        }
        let model = Self::build(store, config, pool)?;
        if model.store.len() != params.len() && lora_rank.is_none() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                params.len(),
                model.store.len()
            )));
        }
        if let Some(expected) = ck.header["base_hash"].as_str() {
            if params.iter().any(|(n, _, _)| is_adapter(n)) && model.base_hash()? != expected {
                return Err(Error::Checkpoint("adapter weights were trained on a different base".into()));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(serde_json::Value::Null, Vec::new())?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?.expect_kind(CHECKPOINT_KIND)?, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{normal_tensor, rng};

    pub(crate) fn tiny() -> UNetConfig {
        UNetConfig {
            latent_channels: 2,
            widths: [4, 8, 8],
            head_dim: 4,
            groups: 2,
            time_dim: 8,
            text_width: 8,
            text_tokens: 6,
            lora_rank: 0,
        }
    }

    #[test]
    fn output_matches_latent_shape() {
        let m = AvdModel::new(tiny(), PromptPool::toy(), 1).unwrap();
        let z = normal_tensor(&mut rng(1, "t", 0), (2, 3, 4, 4, 2), DType::F32).unwrap();
        let p = m.pool.clone();
        let text = m.embed_prompts(&[p.get(0).unwrap(), p.get(9).unwrap()]).unwrap();
        let e = m.predict_noise(&z, &[5, 900], &text).unwrap();
        assert_eq!(e.dims(), z.dims());
        assert!(m.predict_noise(&z, &[5], &text).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_lora_hash() {
        let m = AvdModel::new(tiny(), PromptPool::toy(), 2).unwrap();
        let ck = m.to_checkpoint(serde_json::Value::Null, Vec::new()).unwrap();
        let back = AvdModel::from_checkpoint(&ck, None).unwrap();
        assert_eq!(back.store.snapshot().unwrap(), m.store.snapshot().unwrap());

        let adapted = AvdModel::from_checkpoint(&ck, Some(2)).unwrap();
        assert!(adapted.store.param_count(Some(Group::Adapter)) > 0);
        assert_eq!(adapted.base_hash().unwrap(), m.base_hash().unwrap());
        let ck2 = adapted.to_checkpoint(serde_json::Value::Null, Vec::new()).unwrap();
        assert!(AvdModel::from_checkpoint(&ck2, None).is_ok());
        let mut bad = ck2.clone();
        bad.header["base_hash"] = serde_json::json!("0");
        assert!(AvdModel::from_checkpoint(&bad, None).is_err());
    }
}
