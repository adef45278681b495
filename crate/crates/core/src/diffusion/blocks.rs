//! Building blocks of the denoising U-Net: low-rank adapters, pre-norm
//! attention layers over space, time and text, and the 3D cross-attention
//! block.

use candle_core::{Tensor, D};

use crate::error::{bad_config, Error, Result};
use crate::nn::{self, Attended, ConvP3d, Group, GroupNorm, Init, LayerNorm, Linear, Vb};

/// A projection with an optional low-rank adapter `x -> base(x) + up(down(x))`.
/// `up` starts at zero, so wrapping never changes the output on its own.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    adapter: Option<(Tensor, Tensor)>,
}

impl LoraLinear {
    pub fn plain(base: Linear) -> Self {
        Self { base, adapter: None }
    }

    pub fn rank(&self) -> usize {
        self.adapter.as_ref().map_or(0, |(d, _)| d.dim(1).unwrap_or(0))
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.adapter {
            None => Ok(y),
            Some((down, up)) => {
                let (d_in, d_out) = self.base.dims();
                let mut shape = x.dims().to_vec();
                let rows = x.elem_count() / d_in;
                let delta = x.reshape((rows, d_in))?.matmul(down)?.matmul(up)?;
                *shape.last_mut().expect("non-scalar input") = d_out;
                y + delta.reshape(shape)?
            }
        }
    }
}

/// Wraps `base` with a rank-`rank` adapter whose factors live in the adapter
/// group under `vb`. Adds `rank * (d_in + d_out)` parameters.
pub fn lora_wrap(vb: &Vb, base: Linear, rank: usize) -> Result<LoraLinear> {
    let (d_in, d_out) = base.dims();
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(bad_config(format!("LoRA rank {rank} outside [1, {}]", d_in.min(d_out))));
    }
    let vb = vb.in_group(Group::Adapter);
    let down = vb.get(&[d_in, rank], "lora_down", Init::Normal(1.0 / (d_in as f64).sqrt()))?;
    let up = vb.get(&[rank, d_out], "lora_up", Init::Zeros)?;
    Ok(LoraLinear { base, adapter: Some((down, up)) })
}

fn projection(vb: &Vb, d_in: usize, d_out: usize, init: Init, lora: usize) -> Result<LoraLinear> {
    let base = Linear::with_init(vb, d_in, d_out, init, true)?;
    if lora == 0 {
        Ok(LoraLinear::plain(base))
    } else {
        lora_wrap(vb, base, lora)
    }
}

/// Pre-norm multi-head attention with a zero-initialised output projection.
/// Self-attention when built without a context width.
#[derive(Debug, Clone)]
pub struct AttnLayer {
    pub norm: LayerNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub out: LoraLinear,
    pub heads: usize,
}

impl AttnLayer {
    pub fn new(vb: &Vb, channels: usize, context: Option<usize>, head_dim: usize, lora: usize) -> Result<Self> {
        if head_dim == 0 || channels % head_dim != 0 {
            return Err(bad_config(format!("{channels} channels not divisible by head dim {head_dim}")));
        }
        let c_kv = context.unwrap_or(channels);
        let std_q = Init::Normal(1.0 / (channels as f64).sqrt());
        let std_kv = Init::Normal(1.0 / (c_kv as f64).sqrt());
        Ok(Self {
            norm: LayerNorm::new(&vb.pp("norm"), channels)?,
            q: projection(&vb.pp("q"), channels, channels, std_q, lora)?,
            k: projection(&vb.pp("k"), c_kv, channels, std_kv.clone(), lora)?,
            v: projection(&vb.pp("v"), c_kv, channels, std_kv, lora)?,
            out: projection(&vb.pp("out"), channels, channels, Init::Zeros, lora)?,
            heads: channels / head_dim,
        })
    }

    /// Attention output (before the residual) and its probabilities for
    /// token sequences `x: (n, l, c)`; `context: (n, l_k, c_kv)` for
    /// cross-attention.
    pub fn attend(&self, x: &Tensor, context: Option<&Tensor>) -> candle_core::Result<Attended> {
        let h = self.norm.forward(x)?;
        let kv = context.unwrap_or(&h);
        let a = nn::multi_head_attention(&self.q.forward(&h)?, &self.k.forward(kv)?, &self.v.forward(kv)?, self.heads)?;
        Ok(Attended {
            out: self.out.forward(&a.out)?,
            probs: a.probs,
        })
    }

    pub fn forward(&self, x: &Tensor, context: Option<&Tensor>) -> candle_core::Result<Tensor> {
        x + self.attend(x, context)?.out
    }
}

/// Spatial self-attention of a `(b, t, h, w, c)` field: tokens are the `h*w`
/// sites of each frame.
pub fn spatial_attention(layer: &AttnLayer, z: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c) = z.dims5()?;
    layer.forward(&z.reshape((b * t, h * w, c))?, None)?.reshape((b, t, h, w, c))
}

/// Temporal self-attention: tokens are the frames at each spatial site.
pub fn temporal_attention(layer: &AttnLayer, z: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c) = z.dims5()?;
    let seq = z.permute((0, 2, 3, 1, 4))?.contiguous()?.reshape((b * h * w, t, c))?;
    layer
        .forward(&seq, None)?
        .reshape((b, h, w, t, c))?
        .permute((0, 3, 1, 2, 4))?
        .contiguous()
}

/// Cross-attention of every visual token to the `(b, l, c_text)` prompt
/// embedding.
pub fn cross_attention(layer: &AttnLayer, z: &Tensor, text: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c) = z.dims5()?;
    layer
        .forward(&z.reshape((b, t * h * w, c))?, Some(text))?
        .reshape((b, t, h, w, c))
}

/// GroupNorm + SiLU + pseudo-3D convolution, twice, with a timestep shift
/// in between and a channel-matching skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: ConvP3d,
    time: Linear,
    norm2: GroupNorm,
    conv2: ConvP3d,
    skip: Option<Linear>,
}

fn group_norm_5d(gn: &GroupNorm, x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    gn.forward(&x.reshape((b, t * h * w, c))?)?.reshape((b, t, h, w, c))
}

impl ResBlock {
    pub fn new(vb: &Vb, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&vb.pp("norm1"), groups, c_in)?,
            conv1: ConvP3d::new(&vb.pp("conv1"), c_in, c_out)?,
            time: Linear::new(&vb.pp("time"), time_dim, c_out)?,
            norm2: GroupNorm::new(&vb.pp("norm2"), groups, c_out)?,
            conv2: ConvP3d::new(&vb.pp("conv2"), c_out, c_out)?,
            skip: if c_in == c_out { None } else { Some(Linear::new(&vb.pp("skip"), c_in, c_out)?) },
        })
    }

    /// `x: (b, t, h, w, c_in)`, `temb: (b, time_dim)` already activated.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let (b, _, _, _, _) = x.dims5()?;
        let h = self.conv1.forward(&group_norm_5d(&self.norm1, x)?.silu()?)?;
        let c_out = h.dim(D::Minus1)?;
        let shift = self.time.forward(temb)?.reshape((b, 1, 1, 1, c_out))?;
        let h = h.broadcast_add(&shift)?;
        let h = self.conv2.forward(&group_norm_5d(&self.norm2, &h)?.silu()?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// ResB, then cross-, spatial and temporal attention, each residual.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub res: ResBlock,
    pub ca: AttnLayer,
    pub sa: AttnLayer,
    pub ta: AttnLayer,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub c_in: usize,
    pub c_out: usize,
    pub text_width: usize,
    pub time_dim: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub lora: usize,
}

impl CrossAttnBlock {
    pub fn new(vb: &Vb, d: BlockDims) -> Result<Self> {
        if d.c_in % d.groups != 0 || d.c_out % d.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "block widths {}->{} not divisible into {} groups",
                d.c_in, d.c_out, d.groups
            )));
        }
        Ok(Self {
            res: ResBlock::new(&vb.pp("res"), d.c_in, d.c_out, d.time_dim, d.groups)?,
            ca: AttnLayer::new(&vb.pp("ca"), d.c_out, Some(d.text_width), d.head_dim, d.lora)?,
            sa: AttnLayer::new(&vb.pp("sa"), d.c_out, None, d.head_dim, d.lora)?,
            ta: AttnLayer::new(&vb.pp("ta"), d.c_out, None, d.head_dim, d.lora)?,
        })
    }

    pub fn forward(&self, z: &Tensor, text: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let z = self.res.forward(z, temb)?;
        let z = cross_attention(&self.ca, &z, text)?;
        let z = spatial_attention(&self.sa, &z)?;
        temporal_attention(&self.ta, &z)
    }
}
