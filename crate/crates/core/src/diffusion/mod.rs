//! Diffusion mathematics shared by teacher training and distillation:
//! schedules, the forward process and posterior, the ε / v
//! parameterizations, the training objective, and reverse samplers.

mod objective;
mod process;
mod sampler;
mod schedule;

pub(crate) use objective::evaluate_on_heads;
pub use objective::{
    hybrid_loss, hybrid_loss_with_grads, HeadLoss, LossMode, LossParts, Objective, ObjectiveInputs,
};
pub use process::{
    gaussian_kl, log_sigma_from_v, log_variance_bounds, mean_coefs, mean_from_eps, posterior_coefs,
    posterior_params, q_sample, sigma_from_v, GaussianParams, ModelOut,
};
pub use sampler::{
    denoise_step, generate, respaced_steps, step_from_output, Denoiser, SamplerKind, GENERATE_CHUNK,
};
pub use schedule::{NoiseSchedule, ScheduleKind, BETA_TILDE_LOG_FLOOR};
