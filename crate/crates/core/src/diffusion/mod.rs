//! The generator: noise schedule, conditional denoiser, compositional
//! guidance and DDIM sampling.

pub mod denoiser;
pub mod sampler;
pub mod schedule;

pub use denoiser::{
    pretrain_denoiser, Checkpoint, Denoiser, DenoiserShape, FeatureSlot, PretrainConfig,
    PretrainReport,
};
pub use sampler::{
    composed_eps, ddim_step, sample, timestep_sequence, Conditioning, GeneratedSample,
    GuidanceTerms, GuidanceWeights, Provenance, SamplerConfig,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};
