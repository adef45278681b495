//! Fixtures shared by the benchmarks.

use candle_core::{DType, Tensor};
use eqtaa_core::seed::{normal_tensor, rng};
use eqtaa_core::synth::manifest::plan_record;
use eqtaa_core::synth::{ClipRole, CorpusConfig, PromptPool, VideoClip};

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    normal_tensor(&mut rng(seed, "bench", 0), shape, DType::F32).expect("cpu tensor")
}

/// A rendered 64x64 anchor clip of the default corpus.
pub fn anchor_clip(index: usize) -> VideoClip {
    let record = plan_record(&CorpusConfig::default(), &PromptPool::toy(), ClipRole::Anchor, index).expect("plan");
    record.render().expect("render").0
}
