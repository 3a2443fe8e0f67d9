use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete variance-preserving noise schedule over timesteps `1..=T`.
///
/// Timestep 0 is the clean state: `alpha_bar(0) == 1` by definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    timesteps: usize,
    /// `beta[t - 1]` is the variance added at timestep `t`.
    beta: Vec<f64>,
    /// `alpha_bar[t]` for `t` in `0..=T`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Scaled-linear schedule: `sqrt(beta)` is linear from `sqrt(beta_start)`
    /// to `sqrt(beta_end)` across the `T` timesteps.
    pub fn scaled_linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::config(format!("timesteps must be >= 2, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "beta range must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let (lo, hi) = (beta_start.sqrt(), beta_end.sqrt());
        let last = (timesteps - 1) as f64;
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                let s = lo + (hi - lo) * i as f64 / last;
                s * s
            })
            .collect();

        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        if prod >= 0.01 {
            return Err(Error::config(format!(
                "schedule keeps too much signal at T: alpha_bar(T) = {prod:.4} (need < 0.01)"
            )));
        }
        Ok(Self { timesteps, beta, alpha_bar })
    }

    /// T = 1000, beta in [0.00085, 0.012].
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("default schedule is valid")
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.timesteps {
            return Err(Error::TimestepOutOfRange { t, max: self.timesteps });
        }
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.timesteps })
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn check(&self, t: usize) -> Result<()> {
        self.alpha_bar(t).map(|_| ())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::stable_diffusion()
    }
}

/// `sqrt(alpha_bar(t)) * x0 + sqrt(1 - alpha_bar(t)) * eps`.
pub fn add_noise(x0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::shape(format!("x0 has {} entries, eps has {}", x0.len(), eps.len())));
    }
    let (a, s) = schedule.coefficients(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}
