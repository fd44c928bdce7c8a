//! Preconditioned denoising, score-matching loss and reverse-diffusion sampling.

mod sampler;
mod schedule;
mod train;

pub use sampler::{
    heun_sample, heun_sample_rows, member_seed, sample_ensemble, Denoiser, GaussianDenoiser,
    NetDenoiser, SamplerConfig, SamplerMode, ZeroDenoiser,
};
pub use train::{
    end2end_guides, sample_fields, train_diffusion, DiffLog, DiffTrainConfig, DiffusionMeta,
    DiffusionMode, DiffusionSet,
};
pub use schedule::{
    karras_sigmas, score_loss, score_loss_value, NoiseSchedule, Preconditioner, SigmaSampler,
};

#[cfg(test)]
mod tests;
