//! Text-conditioned latent video diffusion: schedules, the 3D U-Net,
//! training and strided deterministic sampling.

pub mod blocks;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod train;
pub mod unet;

pub use blocks::{cross_attention, lora_wrap, spatial_attention, temporal_attention, AttnLayer, CrossAttnBlock, LoraLinear};
pub use sampler::{
    ddim_reverse, ddim_reverse_from, ddim_step, ddim_steps, generate_variant, generate_variants, generate_with, SamplerOptions,
};
pub use schedule::{ddpm_forward, make_schedule, NoiseSchedule, ScheduleShape};
pub use text::{TextEncoder, Vocab, TEXT_TOKENS};
pub use train::{diffusion_loss, encode_corpus, train_avd, AvdSample, AvdStepLog, AvdTrainConfig, AvdTrainState};
pub use unet::{AvdModel, UNetConfig};
