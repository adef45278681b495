//! Root-seed splitting. Every random stream in the pipeline is derived from
//! one root seed, a purpose tag and an index.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, purpose: &str, index: u64) -> u64 {
    let mut h = mix(root);
    for b in purpose.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ mix(index))
}

pub fn rng(root: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, purpose, index))
}

/// Standard-normal tensor drawn from `rng` (never from a global generator).
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: impl Into<Shape>, dtype: DType) -> candle_core::Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)
}
