//! Consistency functions and consistency distillation against a frozen teacher.
//!
//! A consistency function maps any point of a probability-flow trajectory to
//! its clean endpoint. The student is trained so that its outputs at two
//! adjacent teacher timesteps agree, with the earlier point produced by one
//! guided DDIM step of the teacher and scored by an EMA copy of the student.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_request, DenoiseRequest, Denoiser};
use crate::diffusion::{
    add_noise, column, ddim_step, uniform_timesteps, NoiseSchedule, Prediction, PredictionKind,
};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, sub_rng};
use crate::toynet::{vjp, AdamW, AdamWConfig, LossRecord, SequenceSampler, ToyNet, ToyNetParams};

/// Boundary coefficients `c_skip(t) = sd^2 / ((t/T)^2 s^2 + sd^2)` and
/// `c_out(t) = (t/T) s sd / sqrt(sd^2 + (t/T)^2 s^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Boundary {
    pub sigma_data: f64,
    pub scale: f64,
}

impl Default for Boundary {
    fn default() -> Self {
        Self { sigma_data: 1.0, scale: 1.0 }
    }
}

impl Boundary {
    pub fn c_skip(&self, t: usize, t_max: usize) -> f64 {
        let u = t as f64 / t_max as f64 * self.scale;
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (u * u + sd2)
    }

    pub fn c_out(&self, t: usize, t_max: usize) -> f64 {
        let u = t as f64 / t_max as f64 * self.scale;
        let sd2 = self.sigma_data * self.sigma_data;
        u * self.sigma_data / (sd2 + u * u).sqrt()
    }
}

/// `c_skip(t) x + c_out(t) x0_hat` per frame, with `x0_hat` from `inner`.
///
/// Frames at `t = 0` are returned as-is without looking at the inner estimate,
/// and the inner denoiser is not called at all when every frame is at 0.
pub struct ConsistencyWrapper<D> {
    pub inner: D,
    pub boundary: Boundary,
    t_max: usize,
}

impl<D: Denoiser> ConsistencyWrapper<D> {
    pub fn new(inner: D, schedule: &NoiseSchedule) -> Self {
        Self { inner, boundary: Boundary::default(), t_max: schedule.timesteps() }
    }

    pub fn with_boundary(mut self, boundary: Boundary) -> Self {
        self.boundary = boundary;
        self
    }
}

pub fn consistency_fn<D: Denoiser>(
    x: &DMatrix<f64>,
    t_vec: &[usize],
    wrapper: &ConsistencyWrapper<D>,
    cond: &DMatrix<f64>,
    reference: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    wrapper.denoise(&DenoiseRequest { latents: x, timesteps: t_vec, cond, reference })
}

fn combine_boundary(
    x: &DMatrix<f64>,
    x0: Option<&DMatrix<f64>>,
    t_vec: &[usize],
    boundary: &Boundary,
    t_max: usize,
) -> DMatrix<f64> {
    let mut out = x.clone();
    let Some(x0) = x0 else { return out };
    for (f, &t) in t_vec.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let (cs, co) = (boundary.c_skip(t, t_max), boundary.c_out(t, t_max));
        for k in 0..x.nrows() {
            out[(k, f)] = cs * x[(k, f)] + co * x0[(k, f)];
        }
    }
    out
}

impl<D: Denoiser> Denoiser for ConsistencyWrapper<D> {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        check_request(req, self.inner.latent_dim(), self.inner.cond_dim())?;
        let x0 = if req.timesteps.iter().any(|&t| t > 0) { Some(self.inner.denoise(req)?) } else { None };
        Ok(combine_boundary(req.latents, x0.as_ref(), req.timesteps, &self.boundary, self.t_max))
    }

    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }
}

/// Pseudo-Huber distance `sqrt(|a - b|^2 + c^2) - c`.
pub fn huber(a: &[f64], b: &[f64], c: f64) -> Result<f64> {
    Ok(huber_with_grad(a, b, c)?.0)
}

/// Distance and its gradient with respect to `a`.
fn huber_with_grad(a: &[f64], b: &[f64], c: f64) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("huber: lengths {} and {}", a.len(), b.len())));
    }
    if c <= 0.0 {
        return Err(Error::config("huber constant must be positive"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let root = (sq + c * c).sqrt();
    // sqrt(sq + c^2) - c loses everything to cancellation once sq << c^2.
    let value = sq / (root + c);
    Ok((value, diff.into_iter().map(|d| d / root).collect()))
}

/// Guided prediction `uncond + omega (cond - uncond)`.
///
/// Conversions between parameterizations are affine with coefficients that
/// depend only on `(x_t, t)`, and the guidance weights sum to one, so
/// combining in any shared parameterization equals combining in epsilon
/// space.
pub fn cfg_teacher(pred_cond: &Prediction, pred_uncond: &Prediction, omega: f64) -> Result<Prediction> {
    if pred_cond.kind != pred_uncond.kind {
        return Err(Error::KindMismatch(pred_cond.kind, pred_uncond.kind));
    }
    if pred_cond.values.len() != pred_uncond.values.len() {
        return Err(Error::shape("guided predictions differ in length"));
    }
    let values = pred_uncond.values.iter().zip(&pred_cond.values).map(|(u, c)| u + omega * (c - u)).collect();
    Ok(Prediction::new(pred_cond.kind, values))
}

/// A student whose clean estimate can be differentiated with respect to a
/// flat parameter vector.
pub trait Trainable: Clone {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn flat_params(&self) -> Vec<f64>;
    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()>;
    fn predict_x0(&self, req: &DenoiseRequest<'_>, schedule: &NoiseSchedule) -> Result<DMatrix<f64>>;
    /// `upstream^T d(x0_hat)/d(theta)` as a flat vector.
    fn x0_vjp(&self, req: &DenoiseRequest<'_>, schedule: &NoiseSchedule, upstream: &DMatrix<f64>) -> Result<Vec<f64>>;
}

impl Trainable for ToyNet {
    fn latent_dim(&self) -> usize {
        self.dims().latent
    }

    fn cond_dim(&self) -> usize {
        self.dims().cond
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        self.params.set_flat(flat)
    }

    fn predict_x0(&self, req: &DenoiseRequest<'_>, schedule: &NoiseSchedule) -> Result<DMatrix<f64>> {
        ToyNet::predict_x0(self, req, schedule)
    }

    fn x0_vjp(&self, req: &DenoiseRequest<'_>, schedule: &NoiseSchedule, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        // x0 = a x - s v, so the upstream for v is -s times the upstream for x0.
        let mut dv = upstream.clone();
        for (f, &t) in req.timesteps.iter().enumerate() {
            let (_, s) = schedule.coefficients(t)?;
            dv.column_mut(f).scale_mut(-s);
        }
        let g: ToyNetParams = vjp(&self.params, req.latents, req.timesteps, req.cond, req.reference, self.mask, &dv)?;
        Ok(g.to_flat())
    }
}

/// Any [`Trainable`] behind the [`Denoiser`] interface.
pub struct TrainableDenoiser<M> {
    pub model: M,
    pub schedule: Arc<NoiseSchedule>,
}

impl<M: Trainable + Send + Sync> Denoiser for TrainableDenoiser<M> {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        check_request(req, self.model.latent_dim(), self.model.cond_dim())?;
        self.model.predict_x0(req, &self.schedule)
    }

    fn latent_dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn cond_dim(&self) -> usize {
        self.model.cond_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub ema_rate: f64,
    pub omega: f64,
    pub huber_c: f64,
    pub solver_steps: usize,
    pub boundary: Boundary,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 1200,
            batch_size: 16,
            ema_rate: 0.95,
            omega: 2.0,
            huber_c: 0.001,
            solver_steps: 100,
            boundary: Boundary::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::config(format!("ema_rate {} outside (0, 1]", self.ema_rate)));
        }
        if self.huber_c <= 0.0 {
            return Err(Error::config("huber_c must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.solver_steps == 0 || t_max % self.solver_steps != 0 {
            return Err(Error::config(format!("solver_steps {} must divide T = {t_max}", self.solver_steps)));
        }
        if !self.omega.is_finite() {
            return Err(Error::config("omega must be finite"));
        }
        Ok(())
    }
}

/// Teacher solver grid, ascending: `0, T/S, 2T/S, ..., T`. Adjacent pairs
/// are the `(t_n, t_{n+1})` intervals; the first interval ends on the exact
/// boundary.
pub fn solver_grid(t_max: usize, steps: usize) -> Vec<usize> {
    let mut g = uniform_timesteps(t_max, steps);
    g.push(0);
    g.reverse();
    g
}

/// Online student, its EMA target and the optimizer state.
#[derive(Debug, Clone)]
pub struct DistillState<M> {
    pub online: M,
    pub target: M,
    pub config: DistillConfig,
    opt: AdamW,
    steps: usize,
}

/// A clean training window with its conditioning and reference.
#[derive(Debug, Clone)]
pub struct CleanWindow {
    pub x0: DMatrix<f64>,
    pub cond: DMatrix<f64>,
    pub reference: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdStepReport {
    pub loss: f64,
    /// Euclidean norm of the gradient the optimizer received.
    pub grad_norm: f64,
}

impl<M: Trainable> DistillState<M> {
    pub fn new(student: M, config: DistillConfig) -> Self {
        let n = student.flat_params().len();
        Self { target: student.clone(), online: student, opt: AdamW::new(config.optimizer, n), config, steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `theta_minus <- r theta_minus + (1 - r) theta`.
    fn ema_update(&mut self) -> Result<()> {
        let r = self.config.ema_rate;
        let online = self.online.flat_params();
        let mut target = self.target.flat_params();
        for (t, o) in target.iter_mut().zip(&online) {
            *t = r * *t + (1.0 - r) * o;
        }
        self.target.set_flat_params(&target)
    }
}

/// One teacher DDIM step from `t_next` down to `t` with guidance applied in
/// epsilon space. Without conditioning channels the teacher is called once.
fn guided_teacher_step<T: Denoiser + ?Sized>(
    teacher: &T,
    x: &DMatrix<f64>,
    t_next: usize,
    t: usize,
    window: &CleanWindow,
    omega: f64,
    schedule: &NoiseSchedule,
) -> Result<DMatrix<f64>> {
    let n = x.ncols();
    let ts = vec![t_next; n];
    let cond_x0 =
        teacher.denoise(&DenoiseRequest { latents: x, timesteps: &ts, cond: &window.cond, reference: window.reference.as_ref() })?;
    let guided_x0 = if window.cond.nrows() > 0 && omega != 1.0 {
        let null = DMatrix::zeros(window.cond.nrows(), n);
        let uncond_x0 =
            teacher.denoise(&DenoiseRequest { latents: x, timesteps: &ts, cond: &null, reference: window.reference.as_ref() })?;
        let guided = cfg_teacher(
            &Prediction::new(PredictionKind::X0, cond_x0.as_slice().to_vec()),
            &Prediction::new(PredictionKind::X0, uncond_x0.as_slice().to_vec()),
            omega,
        )?;
        DMatrix::from_vec(x.nrows(), n, guided.values)
    } else {
        cond_x0
    };
    let mut out = DMatrix::zeros(x.nrows(), n);
    for f in 0..n {
        let col = ddim_step(column(x, f), column(&guided_x0, f), t_next, t, schedule)?;
        out.column_mut(f).copy_from_slice(&col);
    }
    Ok(out)
}

/// One consistency-distillation update on `batch`.
///
/// Each window draws its own grid interval `(t_n, t_{n+1})`, is noised to
/// `t_{n+1}`, and the loss is the mean pseudo-Huber distance between the
/// online output there and the target output at the teacher's `t_n` point.
/// Only the online parameters receive the gradient; the target then moves by
/// EMA.
pub fn cd_step<M: Trainable, T: Denoiser + ?Sized>(
    state: &mut DistillState<M>,
    batch: &[CleanWindow],
    teacher: &T,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<CdStepReport> {
    let cfg = state.config.clone();
    cfg.validate(schedule.timesteps())?;
    if batch.is_empty() {
        return Err(Error::config("empty distillation batch"));
    }
    let t_max = schedule.timesteps();
    let grid = solver_grid(t_max, cfg.solver_steps);
    let mut loss = 0.0;
    let mut grad = vec![0.0; state.online.flat_params().len()];
    let scale = 1.0 / batch.len() as f64;
    for w in batch {
        let (d, n) = w.x0.shape();
        let i = rng.random_range(0..cfg.solver_steps);
        let (t_lo, t_hi) = (grid[i], grid[i + 1]);
        let eps = normal_vec(rng, d * n);
        let x_hi = DMatrix::from_vec(d, n, add_noise(w.x0.as_slice(), &eps, t_hi, schedule)?);
        let x_lo = guided_teacher_step(teacher, &x_hi, t_hi, t_lo, w, cfg.omega, schedule)?;

        let lo_ts = vec![t_lo; n];
        let target = if t_lo == 0 {
            x_lo.clone()
        } else {
            let req = DenoiseRequest { latents: &x_lo, timesteps: &lo_ts, cond: &w.cond, reference: w.reference.as_ref() };
            let x0 = state.target.predict_x0(&req, schedule)?;
            combine_boundary(&x_lo, Some(&x0), &lo_ts, &cfg.boundary, t_max)
        };

        let hi_ts = vec![t_hi; n];
        let req = DenoiseRequest { latents: &x_hi, timesteps: &hi_ts, cond: &w.cond, reference: w.reference.as_ref() };
        let x0 = state.online.predict_x0(&req, schedule)?;
        let online = combine_boundary(&x_hi, Some(&x0), &hi_ts, &cfg.boundary, t_max);

        let (dist, d_online) = huber_with_grad(online.as_slice(), target.as_slice(), cfg.huber_c)?;
        loss += scale * dist;
        let c_out = cfg.boundary.c_out(t_hi, t_max);
        let upstream = DMatrix::from_vec(d, n, d_online.into_iter().map(|g| g * c_out * scale).collect());
        for (acc, g) in grad.iter_mut().zip(state.online.x0_vjp(&req, schedule, &upstream)?) {
            *acc += g;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step: state.steps, loss });
    }
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut flat = state.online.flat_params();
    state.opt.update(&mut flat, &grad);
    state.online.set_flat_params(&flat)?;
    state.ema_update()?;
    state.steps += 1;
    Ok(CdStepReport { loss, grad_norm })
}

/// Draw `batch_size` clean windows of `frames` frames.
pub fn draw_batch(
    sampler: &dyn SequenceSampler,
    frames: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CleanWindow>> {
    (0..batch_size)
        .map(|_| {
            let (x0, cond, reference) = sampler.sample(frames, rng)?;
            Ok(CleanWindow { x0, cond, reference })
        })
        .collect()
}

/// Run `config.steps` distillation updates starting from `student_init`.
///
/// Returns the final state (online and EMA students) and one loss record per
/// step.
pub fn distill<M: Trainable, T: Denoiser + ?Sized>(
    teacher: &T,
    student_init: M,
    sampler: &dyn SequenceSampler,
    schedule: &NoiseSchedule,
    frames: usize,
    config: &DistillConfig,
) -> Result<(DistillState<M>, Vec<LossRecord>)> {
    config.validate(schedule.timesteps())?;
    if teacher.latent_dim() != student_init.latent_dim() || sampler.latent_dim() != student_init.latent_dim() {
        return Err(Error::shape("teacher, student and data disagree on latent dimension"));
    }
    if sampler.cond_dim() != student_init.cond_dim() || teacher.cond_dim() != student_init.cond_dim() {
        return Err(Error::shape("teacher, student and data disagree on conditioning dimension"));
    }
    let mut state = DistillState::new(student_init, config.clone());
    let mut rng = sub_rng(config.seed, "distill");
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = draw_batch(sampler, frames, config.batch_size, &mut rng)?;
        let report = cd_step(&mut state, &batch, teacher, schedule, &mut rng)?;
        curve.push(LossRecord { step, loss: report.loss });
    }
    Ok((state, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_coefficients_at_the_ends() {
        let b = Boundary::default();
        assert_eq!(b.c_skip(0, 1000), 1.0);
        assert_eq!(b.c_out(0, 1000), 0.0);
        assert!((b.c_skip(1000, 1000) - 0.5).abs() < 1e-15);
        assert!((b.c_out(1000, 1000) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn solver_grid_is_anchored_at_zero() {
        let g = solver_grid(1000, 100);
        assert_eq!(g.len(), 101);
        assert_eq!((g[0], g[1], g[100]), (0, 10, 1000));
    }

    #[test]
    fn huber_regimes() {
        let z = [0.0; 3];
        assert_eq!(huber(&z, &z, 1e-3).unwrap(), 0.0);
        let big = huber(&[1.0, 0.0], &[0.0, 0.0], 1e-3).unwrap();
        assert!((big / 1.0 - 1.0).abs() < 1e-3);
        let r = 1e-6;
        let small = huber(&[r], &[0.0], 1e-3).unwrap();
        assert!((small / (r * r / 2e-3) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cfg_endpoints() {
        let c = Prediction::new(PredictionKind::Epsilon, vec![1.0, 2.0]);
        let u = Prediction::new(PredictionKind::Epsilon, vec![-1.0, 0.5]);
        assert_eq!(cfg_teacher(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_teacher(&c, &u, 1.0).unwrap(), c);
        let x = Prediction::new(PredictionKind::X0, vec![0.0, 0.0]);
        assert!(matches!(cfg_teacher(&c, &x, 2.0), Err(Error::KindMismatch(..))));
    }
}
