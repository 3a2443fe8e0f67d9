//! Discrete VP diffusion: schedule, forward noising, prediction conversions,
//! sampling updates and the closed-form Gaussian denoisers.

mod oracle;
mod prediction;
mod sampling;
mod schedule;

pub use oracle::{
    gaussian_posterior_denoise, posterior_gain, transport_gain, GaussianOracle, GaussianPrior, OracleMode,
    StandardNormalDenoiser,
};
pub use prediction::{convert_prediction, epsilon_from_x0, Prediction, PredictionKind};
pub use sampling::{
    cm_renoise_step, column, ddim_step, sample_window, uniform_timesteps, update_frame, SamplerKind,
};
pub use schedule::{add_noise, NoiseSchedule};
