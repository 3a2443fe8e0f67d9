use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::prediction::epsilon_from_x0;
use super::schedule::{add_noise, NoiseSchedule};
use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::error::{Error, Result};
use crate::rng::normal_vec;

/// How a clean estimate moves a frame to its next timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Consistency-model multistep: take the clean estimate, re-noise with fresh noise.
    #[default]
    Consistency,
    /// Deterministic DDIM (eta = 0).
    Ddim,
}

/// Deterministic DDIM update from `t` to `t_next < t`.
pub fn ddim_step(
    xt: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t_next >= t {
        return Err(Error::Ordering { current: t, next: t_next });
    }
    if xt.len() != x0_hat.len() {
        return Err(Error::shape("ddim_step: xt and x0_hat lengths differ"));
    }
    let eps = epsilon_from_x0(xt, x0_hat, t, schedule)?;
    let (a, s) = schedule.coefficients(t_next)?;
    Ok(x0_hat.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect())
}

/// Consistency-model re-noise: `x0_hat` itself at `t_next = 0`, otherwise
/// `x0_hat` forward-noised to `t_next` with fresh standard normal noise.
pub fn cm_renoise_step<R: Rng + ?Sized>(
    x0_hat: &[f64],
    t_next: usize,
    rng: &mut R,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check(t_next)?;
    if t_next == 0 {
        return Ok(x0_hat.to_vec());
    }
    let eps = normal_vec(rng, x0_hat.len());
    add_noise(x0_hat, &eps, t_next, schedule)
}

/// Move one frame from `t` to `t_next` given its clean estimate.
pub fn update_frame<R: Rng + ?Sized>(
    sampler: SamplerKind,
    xt: &[f64],
    x0_hat: &[f64],
    t: usize,
    t_next: usize,
    rng: &mut R,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    match sampler {
        SamplerKind::Consistency => cm_renoise_step(x0_hat, t_next, rng, schedule),
        SamplerKind::Ddim => ddim_step(xt, x0_hat, t, t_next, schedule),
    }
}

/// Run a whole window down a descending list of shared timesteps to `t = 0`.
///
/// `timesteps` must be strictly decreasing and non-zero, e.g. `[1000, 750, 500, 250]`.
#[allow(clippy::too_many_arguments)]
pub fn sample_window<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    timesteps: &[usize],
    sampler: SamplerKind,
    init: DMatrix<f64>,
    cond: &DMatrix<f64>,
    reference: Option<&DVector<f64>>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (d, n) = init.shape();
    let mut x = init;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_next = timesteps.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; n];
        let x0 = denoiser.denoise(&DenoiseRequest { latents: &x, timesteps: &ts, cond, reference })?;
        let mut next = DMatrix::zeros(d, n);
        for f in 0..n {
            let col = update_frame(sampler, column(&x, f), column(&x0, f), t, t_next, rng, schedule)?;
            next.column_mut(f).copy_from_slice(&col);
        }
        x = next;
    }
    Ok(x)
}

/// Evenly spaced timesteps `[T, T - T/steps, ..., T/steps]`.
pub fn uniform_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && t_max % steps == 0, "steps must divide T");
    let dt = t_max / steps;
    (1..=steps).rev().map(|k| k * dt).collect()
}

/// Contiguous view of frame `f` of a `d x n` window.
pub fn column(m: &DMatrix<f64>, f: usize) -> &[f64] {
    let d = m.nrows();
    &m.as_slice()[f * d..(f + 1) * d]
}
