//! Tensor primitives shared by the codec, the diffusion U-Net and the
//! anticipation encoder.
//!
//! Feature fields are channel-last throughout: a clip-shaped field is
//! `(batch, frames, height, width, channels)`. Convolutions are expressed as a
//! neighbourhood gather (im2col) followed by a matmul; the gather carries a
//! hand-written scatter-add backward.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, D};

/// Gathers, for every output site, the `offsets.len()` neighbours of a
/// `(b, t, h, w, c)` field (zero outside the field) into one row of length
/// `offsets.len() * c`. Spatial sites are sampled every `stride` pixels.
#[derive(Debug, Clone)]
pub struct NeighborhoodGather {
    dims: [usize; 5],
    offsets: Vec<[isize; 3]>,
    stride: usize,
    replicate: bool,
}

impl NeighborhoodGather {
    pub fn new(dims: [usize; 5], offsets: Vec<[isize; 3]>, stride: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        Self {
            dims,
            offsets,
            stride,
            replicate: false,
        }
    }

    /// Out-of-field neighbours take the nearest edge value instead of zero.
    pub fn replicate(mut self) -> Self {
        self.replicate = true;
        self
    }

    /// 3×3 spatial neighbourhood, row-major over (dy, dx).
    pub fn spatial3x3(dims: [usize; 5], stride: usize) -> Self {
        let mut offsets = Vec::with_capacity(9);
        for dy in -1..=1 {
            for dx in -1..=1 {
                offsets.push([0, dy, dx]);
            }
        }
        Self::new(dims, offsets, stride)
    }

    /// Three-tap temporal neighbourhood `t-1, t, t+1`.
    pub fn temporal3(dims: [usize; 5]) -> Self {
        Self::new(dims, vec![[-1, 0, 0], [0, 0, 0], [1, 0, 0]], 1)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let [_, _, h, w, _] = self.dims;
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn out_rows(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.dims[0] * self.dims[1] * ho * wo
    }

    /// Visits every (output offset, input offset) pair, `c` elements long.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize)) {
        let [b, t, h, w, c] = self.dims;
        let (ho, wo) = self.out_hw();
        let k = self.offsets.len();
        let (ti, hi, wi) = (t as isize, h as isize, w as isize);
        let mut row = 0usize;
        for bb in 0..b {
            for tt in 0..t {
                for yo in 0..ho {
                    for xo in 0..wo {
                        let y = (yo * self.stride) as isize;
                        let x = (xo * self.stride) as isize;
                        for (j, off) in self.offsets.iter().enumerate() {
                            let (mut st, mut sy, mut sx) = (tt as isize + off[0], y + off[1], x + off[2]);
                            if self.replicate {
                                st = st.clamp(0, ti - 1);
                                sy = sy.clamp(0, hi - 1);
                                sx = sx.clamp(0, wi - 1);
                            } else if st < 0 || st >= ti || sy < 0 || sy >= hi || sx < 0 || sx >= wi {
                                continue;
                            }
                            let src = (((bb * t + st as usize) * h + sy as usize) * w + sx as usize) * c;
                            let dst = (row * k + j) * c;
                            f(dst, src);
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let c = self.dims[4];
        let mut out = vec![T::default(); self.out_rows() * self.offsets.len() * c];
        self.for_each_pair(|dst, src| out[dst..dst + c].copy_from_slice(&x[src..src + c]));
        out
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, g: &[T]) -> Vec<T> {
        let c = self.dims[4];
        let mut out = vec![T::default(); self.dims.iter().product()];
        self.for_each_pair(|dst, src| {
            for i in 0..c {
                out[src + i] += g[dst + i];
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((s, e)) => Ok(&v[s..e]),
        None => candle_core::bail!("expected a contiguous input"),
    }
}

impl CustomOp1 for NeighborhoodGather {
    fn name(&self) -> &'static str {
        "neighborhood-gather"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if layout.shape().elem_count() != self.dims.iter().product::<usize>() {
            candle_core::bail!("gather: input has {} elements, expected dims {:?}", layout.shape().elem_count(), self.dims);
        }
        let shape = Shape::from((self.out_rows(), self.offsets.len() * self.dims[4]));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.gather(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.gather(contiguous_slice(v, layout)?)),
            s => candle_core::bail!("gather: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1(ScatterAdd(self.clone()))?;
        Ok(Some(g))
    }
}

/// Adjoint of [`NeighborhoodGather`].
#[derive(Debug, Clone)]
struct ScatterAdd(NeighborhoodGather);

impl CustomOp1 for ScatterAdd {
    fn name(&self) -> &'static str {
        "neighborhood-scatter-add"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let shape = Shape::from(self.0.dims.to_vec());
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.scatter(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.scatter(contiguous_slice(v, layout)?)),
            s => candle_core::bail!("scatter: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(self.0.clone())?))
    }
}

pub fn gather(x: &Tensor, op: NeighborhoodGather) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(op)
}

/// Numerically stable softmax over the last axis (fused forward and
/// backward).
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLast)
}

/// Reference softmax from differentiable primitives.
pub fn softmax_last_reference(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

macro_rules! softmax_kernels {
    ($fwd:ident, $bwd:ident, $t:ty) => {
        fn $fwd(x: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0.0; x.len()];
            for (row, o) in x.chunks(n).zip(out.chunks_mut(n)) {
                let m = row.iter().copied().fold(<$t>::NEG_INFINITY, <$t>::max);
                let mut s = 0.0;
                for (oi, xi) in o.iter_mut().zip(row) {
                    *oi = (xi - m).exp();
                    s += *oi;
                }
                let inv = 1.0 / s;
                o.iter_mut().for_each(|v| *v *= inv);
            }
            out
        }

        /// `dx = y * (dy - sum(dy * y))` per row.
        fn $bwd(y: &[$t], dy: &[$t], n: usize) -> Vec<$t> {
            let mut out = vec![0.0; y.len()];
            for ((yr, gr), o) in y.chunks(n).zip(dy.chunks(n)).zip(out.chunks_mut(n)) {
                let dot: $t = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((oi, a), b) in o.iter_mut().zip(yr).zip(gr) {
                    *oi = a * (b - dot);
                }
            }
            out
        }
    };
}

softmax_kernels!(softmax_rows_f32, softmax_grad_rows_f32, f32);
softmax_kernels!(softmax_rows_f64, softmax_grad_rows_f64, f64);

struct SoftmaxLast;

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows_f32(contiguous_slice(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows_f64(contiguous_slice(v, layout)?, n)),
            s => candle_core::bail!("softmax: unsupported dtype {:?}", s.dtype()),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?))
    }
}

struct SoftmaxGrad;

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => {
                CpuStorage::F32(softmax_grad_rows_f32(contiguous_slice(y, l1)?, contiguous_slice(g, l2)?, n))
            }
            (CpuStorage::F64(y), CpuStorage::F64(g)) => {
                CpuStorage::F64(softmax_grad_rows_f64(contiguous_slice(y, l1)?, contiguous_slice(g, l2)?, n))
            }
            _ => candle_core::bail!("softmax grad: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Layer normalisation over the last axis without affine parameters.
pub fn normalize_last(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let mu = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mu)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    xc.broadcast_div(&(var + eps)?.sqrt()?)
}

/// Group normalisation for channel-last `(batch, tokens, channels)` input:
/// statistics per batch row over all tokens and the channels of each group.
pub fn group_normalize(x: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if c % groups != 0 {
        candle_core::bail!("group norm: {c} channels not divisible by {groups} groups");
    }
    let xg = x.reshape((b, l, groups, c / groups))?;
    let mu = xg.mean_keepdim(3)?.mean_keepdim(1)?;
    let xc = xg.broadcast_sub(&mu)?;
    let var = xc.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
    xc.broadcast_div(&(var + eps)?.sqrt()?)?.reshape((b, l, c))
}

/// Nearest-neighbour ×2 upsampling of a `(b, t, h, w, c)` field.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c) = x.dims5()?;
    x.reshape((b * t * h, 1, w, 1, c))?
        .broadcast_as((b * t * h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, t, 2 * h, 2 * w, c))
}

/// Depth-to-space ×2: `(b, t, h, w, 4c)` with channels ordered `(sy, sx, c)`
/// to `(b, t, 2h, 2w, c)`.
pub fn pixel_shuffle2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h, w, c4) = x.dims5()?;
    if c4 % 4 != 0 {
        candle_core::bail!("pixel shuffle: {c4} channels not divisible by 4");
    }
    let c = c4 / 4;
    x.reshape((b * t * h, w, 2, 2, c))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((b, t, 2 * h, 2 * w, c))
}

/// Inverse of [`pixel_shuffle2`].
pub fn pixel_unshuffle2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, t, h2, w2, c) = x.dims5()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        candle_core::bail!("pixel unshuffle: odd spatial dims {h2}x{w2}");
    }
    let (h, w) = (h2 / 2, w2 / 2);
    x.reshape((b * t * h, 2, w, 2, c))?
        .permute((0, 2, 1, 3, 4))?
        .contiguous()?
        .reshape((b, t, h, w, 4 * c))
}

/// Sinusoidal embedding of a scalar position (diffusion step), `dim` even.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}
