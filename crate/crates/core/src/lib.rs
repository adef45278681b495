pub mod codec;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod taa;

pub use error::{Error, Result};
pub use codec::{Codec, LatentClip};
pub use config::RunConfig;
pub use diffusion::{AvdModel, NoiseSchedule};
pub use metrics::EvalReport;
pub use synth::{EventAnnotation, TextPrompt, TripleSet, VideoClip};
pub use taa::{AccidentScoreSeries, TaaModel};
