//! Convolutions on channel-last `(b, t, h, w, c)` fields.

use candle_core::Tensor;

use super::ops::{gather, NeighborhoodGather};
use super::params::{Init, Linear, Vb};
use crate::error::{bad_config, Result};

/// 3×3 spatial convolution with zero padding, applied to every frame.
/// Weight rows are ordered `[(dy, dx), c_in]`.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub stride: usize,
    /// Edge-replicating instead of zero padding.
    pub replicate: bool,
}

impl Conv3x3 {
    pub fn new(vb: &Vb, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let init = Init::Normal((2.0 / (9 * c_in) as f64).sqrt());
        Self::with_init(vb, c_in, c_out, stride, init)
    }

    pub fn with_init(vb: &Vb, c_in: usize, c_out: usize, stride: usize, init: Init) -> Result<Self> {
        if stride == 0 {
            return Err(bad_config("conv stride must be positive"));
        }
        Ok(Self {
            lin: Linear::with_init(vb, 9 * c_in, c_out, init, true)?,
            stride,
            replicate: false,
        })
    }

    pub fn replicate(mut self) -> Self {
        self.replicate = true;
        self
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        let mut op = NeighborhoodGather::spatial3x3([b, t, h, w, c], self.stride);
        if self.replicate {
            op = op.replicate();
        }
        let (ho, wo) = op.out_hw();
        let y = self.lin.forward(&gather(x, op)?)?;
        y.reshape((b, t, ho, wo, self.lin.dims().1))
    }
}

/// Three-tap convolution along the frame axis with zero padding.
/// Weight rows are ordered `[dt, c_in]` for `dt = -1, 0, 1`.
#[derive(Debug, Clone)]
pub struct TemporalConv3 {
    pub lin: Linear,
}

impl TemporalConv3 {
    /// Dirac initialisation: the centre tap is the identity, so a fresh
    /// layer passes frames through unchanged.
    pub fn dirac(vb: &Vb, channels: usize) -> Result<Self> {
        let mut w = vec![0.0; 3 * channels * channels];
        for c in 0..channels {
            w[(channels + c) * channels + c] = 1.0;
        }
        Ok(Self {
            lin: Linear::with_init(vb, 3 * channels, channels, Init::Values(w), true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, h, w, c) = x.dims5()?;
        let y = self.lin.forward(&gather(x, NeighborhoodGather::temporal3([b, t, h, w, c]))?)?;
        y.reshape((b, t, h, w, self.lin.dims().1))
    }
}

/// Pseudo-3D convolution: a per-frame 3×3 convolution followed by a
/// three-tap temporal convolution at every spatial site.
#[derive(Debug, Clone)]
pub struct ConvP3d {
    pub spatial: Conv3x3,
    pub temporal: TemporalConv3,
}

impl ConvP3d {
    pub fn new(vb: &Vb, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv3x3::new(&vb.pp("spatial"), c_in, c_out, 1)?,
            temporal: TemporalConv3::dirac(&vb.pp("temporal"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.temporal.forward(&self.spatial.forward(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn dirac_temporal_is_identity() {
        let store = ParamStore::new(1, DType::F64);
        let conv = TemporalConv3::dirac(&store.root(), 3).unwrap();
        let x = crate::seed::normal_tensor(&mut crate::seed::rng(1, "test", 0), (2, 4, 3, 2, 3), candle_core::DType::F64).unwrap();
        let y = conv.forward(&x).unwrap();
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let store = ParamStore::new(1, DType::F32);
        let conv = Conv3x3::new(&store.root(), 3, 5, 2).unwrap();
        let x = Tensor::zeros((1, 2, 8, 6, 3), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 2, 4, 3, 5]);
    }
}
