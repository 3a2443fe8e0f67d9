use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, Sample};
use super::optim::{AdamW, AdamWConfig};
use super::ToyNet;
use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::diffusion::{GaussianPrior, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, sub_rng};
use crate::temporal::{group_timesteps, ScheduleConfig};

/// Source of clean training windows.
pub trait SequenceSampler {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// Clean `d x frames` window, its `c x frames` conditioning, and an
    /// optional reference frame.
    fn sample(&self, frames: usize, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>, Option<DVector<f64>>)>;
}

/// Windows drawn from a Gaussian prior.
///
/// With `cond_dim == d`, each frame gets standard normal conditioning `c` and
/// its mean shifts by `cond_gain * c`, matching
/// [`GaussianOracle::with_conditioning`](crate::diffusion::GaussianOracle::with_conditioning).
/// With `with_reference`, one extra leading frame of the same sequence is
/// returned as the reference.
#[derive(Debug, Clone)]
pub struct GaussianSequences {
    prior: GaussianPrior,
    chol: DMatrix<f64>,
    pub cond_dim: usize,
    pub cond_gain: f64,
    pub with_reference: bool,
}

impl GaussianSequences {
    pub fn new(prior: GaussianPrior) -> Result<Self> {
        let chol = prior
            .covariance()
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("prior covariance is not positive definite".into()))?
            .l();
        Ok(Self { prior, chol, cond_dim: 0, cond_gain: 0.0, with_reference: false })
    }

    pub fn with_conditioning(mut self, cond_dim: usize, gain: f64) -> Self {
        self.cond_dim = cond_dim;
        self.cond_gain = gain;
        self
    }

    pub fn with_reference(mut self, on: bool) -> Self {
        self.with_reference = on;
        self
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }
}

impl SequenceSampler for GaussianSequences {
    fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn sample(&self, frames: usize, rng: &mut ChaCha8Rng) -> Result<(DMatrix<f64>, DMatrix<f64>, Option<DVector<f64>>)> {
        let d = self.prior.dim();
        let total = frames + usize::from(self.with_reference);
        if total > self.prior.frames() {
            return Err(Error::shape(format!("{total} frames requested from a {}-frame prior", self.prior.frames())));
        }
        let n = total * d;
        // The Cholesky factor of a leading block is the leading block of the factor.
        let z = DVector::from_vec(normal_vec(rng, n));
        let l = self.chol.view((0, 0), (n, n));
        let x = self.prior.mean().rows(0, n) + l * z;
        let mut window = DMatrix::from_column_slice(d, total, x.as_slice());
        let cond = if self.cond_dim > 0 {
            let c = DMatrix::from_column_slice(self.cond_dim, frames, &normal_vec(rng, self.cond_dim * frames));
            if self.cond_dim == d && self.cond_gain != 0.0 {
                let shift = &c * self.cond_gain;
                let mut cols = window.columns_mut(total - frames, frames);
                cols += shift;
            }
            c
        } else {
            DMatrix::zeros(0, frames)
        };
        let reference = self.with_reference.then(|| DVector::from_column_slice(window.column(0).as_slice()));
        if self.with_reference {
            window = window.columns(1, frames).into_owned();
        }
        Ok((window, cond, reference))
    }
}

/// How per-frame noise levels are drawn for a training window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLayout {
    /// One timestep shared by the window, uniform on `[1, T]`.
    Uniform,
    /// Staggered group timesteps with `t0` uniform on the integer grid `[1, T/G]`.
    #[default]
    TemporalAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub layout: NoiseLayout,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            layout: NoiseLayout::TemporalAdaptive,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

fn draw_timesteps<R: Rng + ?Sized>(layout: NoiseLayout, cfg: &ScheduleConfig, rng: &mut R) -> Result<Vec<usize>> {
    Ok(match layout {
        NoiseLayout::Uniform => vec![rng.random_range(1..=cfg.timesteps); cfg.frames],
        NoiseLayout::TemporalAdaptive => {
            let t0 = rng.random_range(1..=cfg.level_spacing());
            group_timesteps(cfg, t0)?.vec
        }
    })
}

/// Noise a clean window to `timesteps` and pair it with its v target.
pub fn make_sample(
    x0: &DMatrix<f64>,
    cond: DMatrix<f64>,
    reference: Option<DVector<f64>>,
    timesteps: Vec<usize>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let (d, n) = x0.shape();
    let eps = DMatrix::from_column_slice(d, n, &normal_vec(rng, d * n));
    let mut latents = DMatrix::zeros(d, n);
    let mut target = DMatrix::zeros(d, n);
    for (f, &t) in timesteps.iter().enumerate() {
        let (a, s) = schedule.coefficients(t)?;
        for k in 0..d {
            latents[(k, f)] = a * x0[(k, f)] + s * eps[(k, f)];
            target[(k, f)] = a * eps[(k, f)] - s * x0[(k, f)];
        }
    }
    Ok(Sample { latents, timesteps, cond, reference, target })
}

fn draw_sample(
    sampler: &dyn SequenceSampler,
    cfg: &ScheduleConfig,
    layout: NoiseLayout,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let (x0, cond, reference) = sampler.sample(cfg.frames, rng)?;
    let t = draw_timesteps(layout, cfg, rng)?;
    make_sample(&x0, cond, reference, t, schedule, rng)
}

/// Fit `net` to v-prediction on windows noised per `train.layout`.
///
/// Returns the loss curve, one record per step. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train_temporal_adaptive(
    net: &mut ToyNet,
    sampler: &dyn SequenceSampler,
    schedule: &NoiseSchedule,
    cfg: &ScheduleConfig,
    train: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let dims = net.dims();
    if sampler.latent_dim() != dims.latent || sampler.cond_dim() != dims.cond {
        return Err(Error::shape(format!(
            "sampler produces {}/{} (latent/cond), network expects {}/{}",
            sampler.latent_dim(),
            sampler.cond_dim(),
            dims.latent,
            dims.cond
        )));
    }
    if train.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut rng = sub_rng(train.seed, "train");
    let mut opt = AdamW::new(train.optimizer, net.params.num_params());
    let mut flat = net.params.to_flat();
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<Sample> = (0..train.batch_size)
            .map(|_| draw_sample(sampler, cfg, train.layout, schedule, &mut rng))
            .collect::<Result<_>>()?;
        let (loss, grad) = loss_and_grad(&net.params, &batch, net.mask)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        opt.update(&mut flat, &grad.to_flat());
        net.params.set_flat(&flat)?;
        curve.push(LossRecord { step, loss });
    }
    Ok(curve)
}

/// A fixed set of noised windows for validation.
pub fn validation_set(
    sampler: &dyn SequenceSampler,
    cfg: &ScheduleConfig,
    layout: NoiseLayout,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = sub_rng(seed, "validation");
    (0..count).map(|_| draw_sample(sampler, cfg, layout, schedule, &mut rng)).collect()
}

/// Mean squared v error of any clean-estimate denoiser on `set`, with
/// `v_hat = (sqrt(ab) x_t - x0_hat) / sqrt(1 - ab)`.
pub fn denoiser_v_mse<D: Denoiser + ?Sized>(denoiser: &D, set: &[Sample], schedule: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in set {
        let x0 = denoiser.denoise(&DenoiseRequest {
            latents: &s.latents,
            timesteps: &s.timesteps,
            cond: &s.cond,
            reference: s.reference.as_ref(),
        })?;
        for (f, &t) in s.timesteps.iter().enumerate() {
            let (a, sd) = schedule.coefficients(t)?;
            if sd == 0.0 {
                return Err(Error::DivisionByZero("v error at t = 0"));
            }
            for k in 0..s.latents.nrows() {
                let v_hat = (a * s.latents[(k, f)] - x0[(k, f)]) / sd;
                total += (v_hat - s.target[(k, f)]).powi(2);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
