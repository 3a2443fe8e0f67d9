//! Closed-form denoisers for Gaussian data.
//!
//! With per-frame noising `x_t = A x0 + R^{1/2} eps`, where `A` scales frame
//! `i` by `sqrt(alpha_bar(t_i))` and `R` holds `1 - alpha_bar(t_i)`, the noisy
//! window is `N(A mu, C)` with `C = A Sigma A + R`. Two linear maps out of it
//! are useful:
//!
//! * the posterior mean `mu + Sigma A C^{-1} (x_t - A mu)`, the MSE-optimal
//!   clean estimate used by solver-style samplers and as a distillation teacher;
//! * the optimal-transport map from `N(A mu, C)` onto the prior. For a
//!   timestep shared by all frames it is exactly the probability-flow ODE
//!   endpoint, i.e. the consistency function of the Gaussian model, and it
//!   stays a valid transport for staggered timesteps.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::denoiser::{check_request, DenoiseRequest, Denoiser};
use crate::error::{Error, Result};

/// Gaussian prior over a window of `frames` frames of dimension `dim`,
/// flattened frame-major (`index = frame * dim + k`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    frames: usize,
    dim: usize,
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(frames: usize, dim: usize, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = frames * dim;
        if frames == 0 || dim == 0 {
            return Err(Error::config("prior needs at least one frame and one dimension"));
        }
        if mu.len() != n || sigma.shape() != (n, n) {
            return Err(Error::shape(format!(
                "prior for {frames}x{dim} needs mean of {n} and {n}x{n} covariance"
            )));
        }
        let asym = (&sigma - sigma.transpose()).amax();
        if asym > 1e-12 * sigma.amax().max(1.0) {
            return Err(Error::Numeric(format!("prior covariance is not symmetric (max |S - S^T| = {asym:e})")));
        }
        if sigma.clone().cholesky().is_none() {
            return Err(Error::Numeric(format!(
                "prior covariance is not positive definite ({})",
                condition_report(&sigma)
            )));
        }
        Ok(Self { frames, dim, mu, sigma })
    }

    /// Stationary AR(1) over frames, independent across latent dimensions:
    /// `Cov(x[i, k], x[j, l]) = variance * rho^|i - j| * [k == l]`.
    pub fn ar1(frames: usize, dim: usize, rho: f64, variance: f64, mean: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::config(format!("AR(1) correlation must satisfy |rho| < 1, got {rho}")));
        }
        if !(variance > 0.0) {
            return Err(Error::config(format!("prior variance must be positive, got {variance}")));
        }
        let n = frames * dim;
        let sigma = DMatrix::from_fn(n, n, |r, c| {
            if r % dim != c % dim {
                0.0
            } else {
                let lag = (r / dim).abs_diff(c / dim) as i32;
                variance * rho.powi(lag)
            }
        });
        Self::new(frames, dim, DVector::from_element(n, mean), sigma)
    }

    /// `N(0, I)` over the window.
    pub fn standard(frames: usize, dim: usize) -> Self {
        let n = frames * dim;
        Self::new(frames, dim, DVector::zeros(n), DMatrix::identity(n, n)).expect("identity prior")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Marginal prior of the first `frames` frames.
    pub fn prefix(&self, frames: usize) -> Result<Self> {
        if frames == 0 || frames > self.frames {
            return Err(Error::shape(format!("prefix of {frames} frames from a {}-frame prior", self.frames)));
        }
        let n = frames * self.dim;
        Ok(Self {
            frames,
            dim: self.dim,
            mu: self.mu.rows(0, n).into_owned(),
            sigma: self.sigma.view((0, 0), (n, n)).into_owned(),
        })
    }

    /// Per-dimension marginal variance of frame 0.
    pub fn marginal_variance(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.sigma[(k, k)]).collect()
    }

    pub fn marginal_mean(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.mu[k]).collect()
    }
}

/// Per-entry `(sqrt(alpha_bar), 1 - alpha_bar)` for a flattened window.
fn noise_scales(schedule: &NoiseSchedule, t_vec: &[usize], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(t_vec.len() * dim);
    let mut r = Vec::with_capacity(t_vec.len() * dim);
    for &t in t_vec {
        let ab = schedule.alpha_bar(t)?;
        for _ in 0..dim {
            a.push(ab.sqrt());
            r.push(1.0 - ab);
        }
    }
    Ok((a, r))
}

fn noised_covariance(prior: &GaussianPrior, a: &[f64], r: &[f64]) -> DMatrix<f64> {
    let n = a.len();
    DMatrix::from_fn(n, n, |i, j| {
        let v = a[i] * prior.sigma[(i, j)] * a[j];
        if i == j {
            v + r[i]
        } else {
            v
        }
    })
}

fn condition_report(m: &DMatrix<f64>) -> String {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    format!("eigenvalues in [{min:e}, {max:e}], condition number {:e}", max.abs() / min.abs())
}

fn check_window(prior: &GaussianPrior, t_vec: &[usize]) -> Result<()> {
    if t_vec.len() != prior.frames {
        return Err(Error::shape(format!(
            "{} timesteps for a {}-frame prior",
            t_vec.len(),
            prior.frames
        )));
    }
    Ok(())
}

/// Gain `M` of the posterior mean `mu + M (x_t - A mu)`.
pub fn posterior_gain(prior: &GaussianPrior, schedule: &NoiseSchedule, t_vec: &[usize]) -> Result<DMatrix<f64>> {
    check_window(prior, t_vec)?;
    let (a, r) = noise_scales(schedule, t_vec, prior.dim)?;
    let c = noised_covariance(prior, &a, &r);
    let chol = c.clone().cholesky().ok_or_else(|| {
        Error::Numeric(format!("noised covariance A S A^T + R is not SPD ({})", condition_report(&c)))
    })?;
    // M = Sigma A C^{-1}; with both symmetric, M^T = C^{-1} (A Sigma).
    let mut a_sigma = prior.sigma.clone();
    for (i, mut row) in a_sigma.row_iter_mut().enumerate() {
        row *= a[i];
    }
    Ok(chol.solve(&a_sigma).transpose())
}

/// Optimal-transport map `T` from `N(A mu, C)` onto `N(mu, Sigma)`:
/// `T = C^{-1/2} (C^{1/2} Sigma C^{1/2})^{1/2} C^{-1/2}`.
pub fn transport_gain(prior: &GaussianPrior, schedule: &NoiseSchedule, t_vec: &[usize]) -> Result<DMatrix<f64>> {
    check_window(prior, t_vec)?;
    let (a, r) = noise_scales(schedule, t_vec, prior.dim)?;
    let c = noised_covariance(prior, &a, &r);
    let eig = SymmetricEigen::new(c.clone());
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::Numeric(format!(
            "noised covariance A S A^T + R is not SPD ({})",
            condition_report(&c)
        )));
    }
    let c_half = spectral_map(&eig, f64::sqrt);
    let c_inv_half = spectral_map(&eig, |x| 1.0 / x.sqrt());
    let inner = &c_half * &prior.sigma * &c_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let inner_eig = SymmetricEigen::new(inner);
    let inner_half = spectral_map(&inner_eig, |x| x.max(0.0).sqrt());
    Ok(&c_inv_half * inner_half * &c_inv_half)
}

fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * f(eig.eigenvalues[j]));
    scaled * q.transpose()
}

/// Apply `x0 = mean + gain (x_t - A mean)` to a `d x n` window. Frames at
/// `t = 0` are returned unchanged: they are observed exactly.
fn apply_gain(
    gain: &DMatrix<f64>,
    mean: &DVector<f64>,
    schedule: &NoiseSchedule,
    xt: &DMatrix<f64>,
    t_vec: &[usize],
) -> Result<DMatrix<f64>> {
    let (d, n) = xt.shape();
    let (a, _) = noise_scales(schedule, t_vec, d)?;
    let flat = xt.as_slice();
    let resid = DVector::from_iterator(d * n, (0..d * n).map(|i| flat[i] - a[i] * mean[i]));
    let est = mean + gain * resid;
    let mut out = DMatrix::from_column_slice(d, n, est.as_slice());
    for (f, &t) in t_vec.iter().enumerate() {
        if t == 0 {
            out.column_mut(f).copy_from(&xt.column(f));
        }
    }
    Ok(out)
}

/// Exact posterior mean `E[x0 | x_t]` of a window under independent per-frame noising.
pub fn gaussian_posterior_denoise(
    xt: &DMatrix<f64>,
    t_vec: &[usize],
    prior: &GaussianPrior,
    schedule: &NoiseSchedule,
) -> Result<DMatrix<f64>> {
    if xt.nrows() != prior.dim || xt.ncols() != t_vec.len() {
        return Err(Error::shape(format!(
            "window is {}x{}, prior frame dim {} with {} timesteps",
            xt.nrows(),
            xt.ncols(),
            prior.dim,
            t_vec.len()
        )));
    }
    let prior = if xt.ncols() == prior.frames { prior.clone() } else { prior.prefix(xt.ncols())? };
    if t_vec.iter().all(|&t| t == 0) {
        schedule.check(0)?;
        return Ok(xt.clone());
    }
    let gain = posterior_gain(&prior, schedule, t_vec)?;
    apply_gain(&gain, &prior.mu, schedule, xt, t_vec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// `E[x0 | x_t]`.
    PosteriorMean,
    /// Transport onto the prior (consistency function for shared timesteps).
    #[default]
    Transport,
}

/// Cached closed-form denoiser for a Gaussian prior.
///
/// Gains are cached per timestep vector; a streaming run cycles through only a
/// handful of distinct vectors, so after warmup every call is a mat-vec.
/// Windows shorter than the prior use its leading frames.
pub struct GaussianOracle {
    prior: GaussianPrior,
    schedule: Arc<NoiseSchedule>,
    mode: OracleMode,
    cond_dim: usize,
    cond_gain: f64,
    cache: RwLock<HashMap<Vec<usize>, Arc<DMatrix<f64>>>>,
}

impl GaussianOracle {
    pub fn new(prior: GaussianPrior, schedule: Arc<NoiseSchedule>, mode: OracleMode) -> Self {
        Self { prior, schedule, mode, cond_dim: 0, cond_gain: 0.0, cache: RwLock::new(HashMap::new()) }
    }

    /// Accept `cond_dim`-dimensional conditioning. When `cond_dim` equals the
    /// latent dimension, conditioning shifts the prior mean of each frame by
    /// `gain * cond`; otherwise it is accepted and ignored.
    pub fn with_conditioning(mut self, cond_dim: usize, gain: f64) -> Self {
        self.cond_dim = cond_dim;
        self.cond_gain = gain;
        self
    }

    pub fn prior(&self) -> &GaussianPrior {
        &self.prior
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn cached_gains(&self) -> usize {
        self.cache.read().expect("oracle cache poisoned").len()
    }

    fn gain(&self, t_vec: &[usize]) -> Result<Arc<DMatrix<f64>>> {
        if let Some(g) = self.cache.read().expect("oracle cache poisoned").get(t_vec) {
            return Ok(Arc::clone(g));
        }
        let prior = self.prior.prefix(t_vec.len())?;
        let gain = match self.mode {
            OracleMode::PosteriorMean => posterior_gain(&prior, &self.schedule, t_vec)?,
            OracleMode::Transport => transport_gain(&prior, &self.schedule, t_vec)?,
        };
        let gain = Arc::new(gain);
        self.cache
            .write()
            .expect("oracle cache poisoned")
            .entry(t_vec.to_vec())
            .or_insert_with(|| Arc::clone(&gain));
        Ok(gain)
    }
}

impl Denoiser for GaussianOracle {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        check_request(req, self.prior.dim, self.cond_dim)?;
        let n = req.latents.ncols();
        if n > self.prior.frames {
            return Err(Error::shape(format!("window of {n} frames exceeds the {}-frame prior", self.prior.frames)));
        }
        if req.timesteps.iter().all(|&t| t == 0) {
            return Ok(req.latents.clone());
        }
        let gain = self.gain(req.timesteps)?;
        let mut mean = self.prior.mu.rows(0, n * self.prior.dim).into_owned();
        if self.cond_gain != 0.0 && self.cond_dim == self.prior.dim {
            mean += DVector::from_column_slice(req.cond.as_slice()) * self.cond_gain;
        }
        apply_gain(&gain, &mean, &self.schedule, req.latents, req.timesteps)
    }

    fn latent_dim(&self) -> usize {
        self.prior.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }
}

/// Closed-form denoiser for i.i.d. `N(0, I)` frames: posterior mean
/// `sqrt(alpha_bar) x_t`, transport map the identity. Costs O(n d), which makes
/// it the stand-in when timing the engine itself.
#[derive(Debug, Clone)]
pub struct StandardNormalDenoiser {
    schedule: Arc<NoiseSchedule>,
    dim: usize,
    mode: OracleMode,
}

impl StandardNormalDenoiser {
    pub fn new(schedule: Arc<NoiseSchedule>, dim: usize, mode: OracleMode) -> Self {
        Self { schedule, dim, mode }
    }
}

impl Denoiser for StandardNormalDenoiser {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        check_request(req, self.dim, 0)?;
        let mut out = req.latents.clone();
        if self.mode == OracleMode::PosteriorMean {
            for (f, &t) in req.timesteps.iter().enumerate() {
                let (a, _) = self.schedule.coefficients(t)?;
                out.column_mut(f).scale_mut(a);
            }
        }
        Ok(out)
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }
}
