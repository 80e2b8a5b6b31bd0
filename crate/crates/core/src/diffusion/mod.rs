//! Variance-preserving diffusion: schedules, forward noising, ancestral and
//! deterministic samplers, and guidance combinators.

mod guidance;
mod sampler;
mod schedule;

pub use guidance::{blend_guidance, cfg_combine, GuidanceMode, GuidanceSpec};
pub use sampler::{ddim_step, ddim_timesteps, ddpm_step, sample, NoisePredictor, Sampler};
pub use schedule::{eps_to_score, forward_noise, Schedule, ScheduleKind};
