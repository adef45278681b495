//! Minimal neural-network toolkit on top of candle tensors.

pub mod checkpoint;
pub mod conv;
pub mod ops;
pub mod optim;
pub mod params;

use candle_core::Tensor;

pub use checkpoint::Checkpoint;
pub use conv::{Conv3x3, ConvP3d, TemporalConv3};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Group, GroupNorm, Init, LayerNorm, Linear, ParamStore, Vb};

/// Result of a multi-head attention: the merged head outputs `(b, lq, c)` and
/// the attention probabilities `(b, heads, lq, lk)`.
pub struct Attended {
    pub out: Tensor,
    pub probs: Tensor,
}

/// Scaled dot-product attention of already-projected `q: (b, lq, c)` against
/// `k, v: (b, lk, c)` split into `heads` heads of width `c / heads`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> candle_core::Result<Attended> {
    let probs = attention_probs(q, k, heads)?;
    let out = apply_attention(&probs, v)?;
    Ok(Attended { out, probs })
}

/// Softmax attention weights `(b, heads, lq, lk)`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> candle_core::Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    if c % heads != 0 {
        candle_core::bail!("{c} channels not divisible by {heads} heads");
    }
    let dk = c / heads;
    let q = (q / (dk as f64).sqrt())?;
    let qh = q.reshape((b, lq, heads, dk))?.transpose(1, 2)?.contiguous()?;
    let kh = k.reshape((b, lk, heads, dk))?.transpose(1, 2)?.contiguous()?;
    let scores = qh.matmul(&kh.t()?)?;
    ops::softmax_last(&scores)
}

/// Applies `(b, heads, lq, lk)` weights to `v: (b, lk, c)`, merging heads.
pub fn apply_attention(probs: &Tensor, v: &Tensor) -> candle_core::Result<Tensor> {
    let (b, heads, lq, lk) = probs.dims4()?;
    let c = v.dim(2)?;
    let vh = v.reshape((b, lk, heads, c / heads))?.transpose(1, 2)?.contiguous()?;
    probs
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_gets_full_weight() {
        let q = crate::seed::normal_tensor(&mut crate::seed::rng(1, "test", 0), (2, 3, 4), candle_core::DType::F64).unwrap();
        let k = crate::seed::normal_tensor(&mut crate::seed::rng(2, "test", 0), (2, 1, 4), candle_core::DType::F64).unwrap();
        let a = multi_head_attention(&q, &k, &k, 2).unwrap();
        let p: Vec<f64> = a.probs.flatten_all().unwrap().to_vec1().unwrap();
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let out = a.out.to_vec3::<f64>().unwrap();
        let kv = k.to_vec3::<f64>().unwrap();
        for b in 0..2 {
            for row in &out[b] {
                assert_eq!(row, &kv[b][0]);
            }
        }
    }
}
