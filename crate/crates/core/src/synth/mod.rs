//! Synthetic dashcam corpus: rendering, prompts, annotations and triple sets.

pub mod annotation;
pub mod clip;
pub mod manifest;
pub mod prompts;
pub mod scenario;
pub mod triple;

pub use annotation::{EventAnnotation, Sidecar};
pub use clip::VideoClip;
pub use manifest::{ClipRole, CorpusConfig, ManifestRecord};
pub use prompts::{Polarity, PromptPool, TextPrompt};
pub use scenario::{generate_clip, ObjectClass, ScenarioSpec};
pub use triple::{build_triple_set, sample_random_indicator, IndicatorRange, TripleSet, GENERATION_LEN};
