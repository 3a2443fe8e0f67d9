//! FIFO latent pile and the streaming loop.
//!
//! The pile holds at most `K` frames, oldest (least noisy) at the head. Each
//! outer step runs `N` joint denoiser calls over the whole pile, each lowering
//! every frame by `T / (N G)`. Frames that reach `t = 0` are popped from the
//! head, and a fresh group of noise is pushed at the tail at `t = T`.
//!
//! Startup is soft by default: the pile begins with a single group and grows
//! by one group per step until it holds `K` frames. When the input runs out,
//! steps continue without pushes until the pile is empty.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::diffusion::{add_noise, column, update_frame, NoiseSchedule, SamplerKind};
use crate::error::{Error, Result};
use crate::rng::{frame_noise, sub_rng, sub_seed};
use crate::temporal::ScheduleConfig;

/// How the pile is filled before the first step.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Startup {
    /// One group of pure noise at `T`, growing by a group per step.
    #[default]
    Soft,
    /// A full pile at once: every frame is this still latent, forward-noised
    /// to its group's level.
    StillImage(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOptions {
    pub seed: u64,
    pub sampler: SamplerKind,
    pub startup: Startup,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self { seed: 0, sampler: SamplerKind::Consistency, startup: Startup::Soft }
    }
}

/// Initial noise of the frame with global index `index`. Shared with offline
/// baselines so both start from the same draws.
pub fn initial_noise(seed: u64, index: u64, dim: usize) -> Vec<f64> {
    frame_noise(sub_seed(seed, "init"), index, dim)
}

#[derive(Debug, Clone)]
struct PileEntry {
    index: u64,
    latent: Vec<f64>,
    cond: DVector<f64>,
    timestep: usize,
    evaluations: usize,
    pushed_at: Instant,
}

/// A clean frame leaving the pile.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvent {
    pub index: u64,
    pub latent: Vec<f64>,
    /// Time since the frame's noise was pushed.
    pub wall_time: Duration,
    /// Denoiser calls the frame took part in.
    pub evaluations: usize,
}

/// Per-step metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    /// Pile length when the step started.
    pub pile_len: usize,
    pub popped: usize,
    /// Head timestep at the first denoiser call of the step.
    pub t0: usize,
    pub step_wall_nanos: u64,
    #[serde(skip)]
    pub denoiser_nanos: u64,
}

/// Result of one outer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub events: Vec<FrameEvent>,
    pub record: StepRecord,
}

/// A streaming pipeline instance.
pub struct Engine {
    cfg: ScheduleConfig,
    schedule: Arc<NoiseSchedule>,
    options: EngineOptions,
    dim: usize,
    cond_dim: usize,
    pile: VecDeque<PileEntry>,
    reference: Option<DVector<f64>>,
    rng: ChaCha8Rng,
    iteration: u64,
    warmup_remaining: usize,
    pushed: u64,
    popped: u64,
    denoiser_calls: u64,
}

impl Engine {
    /// Build the engine and fill the initial pile.
    ///
    /// `initial_cond` binds conditioning to the first frames: `g` vectors for a
    /// soft start, `K` for a still-image start.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        cfg: ScheduleConfig,
        schedule: Arc<NoiseSchedule>,
        options: EngineOptions,
        dim: usize,
        cond_dim: usize,
        reference: Option<DVector<f64>>,
        initial_cond: Vec<DVector<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if schedule.timesteps() != cfg.timesteps {
            return Err(Error::config(format!(
                "schedule has T = {} but the window config has T = {}",
                schedule.timesteps(),
                cfg.timesteps
            )));
        }
        if dim == 0 {
            return Err(Error::config("latent dimension must be positive"));
        }
        if let Some(r) = &reference {
            if r.len() != dim {
                return Err(Error::shape(format!("reference dim {} != {}", r.len(), dim)));
            }
        }
        let rng = sub_rng(options.seed, "engine");
        let mut engine = Self {
            cfg,
            schedule,
            dim,
            cond_dim,
            pile: VecDeque::with_capacity(cfg.frames),
            reference,
            rng,
            iteration: 0,
            warmup_remaining: cfg.groups - 1,
            pushed: 0,
            popped: 0,
            denoiser_calls: 0,
            options,
        };
        match engine.options.startup.clone() {
            Startup::Soft => {
                engine.push_noise(initial_cond)?;
            }
            Startup::StillImage(image) => {
                if image.len() != dim {
                    return Err(Error::shape(format!("still image dim {} != {}", image.len(), dim)));
                }
                if initial_cond.len() != cfg.frames {
                    return Err(Error::shape(format!(
                        "still-image startup needs {} conditioning frames, got {}",
                        cfg.frames,
                        initial_cond.len()
                    )));
                }
                let g = cfg.group_size();
                let now = Instant::now();
                for (i, cond) in initial_cond.into_iter().enumerate() {
                    engine.check_cond(&cond)?;
                    let t = (i / g + 1) * cfg.level_spacing();
                    let eps = initial_noise(engine.options.seed, engine.pushed, dim);
                    let latent = add_noise(&image, &eps, t, &engine.schedule)?;
                    engine.pile.push_back(PileEntry {
                        index: engine.pushed,
                        latent,
                        cond,
                        timestep: t,
                        evaluations: 0,
                        pushed_at: now,
                    });
                    engine.pushed += 1;
                }
                engine.warmup_remaining = 0;
            }
        }
        Ok(engine)
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    pub fn pile_len(&self) -> usize {
        self.pile.len()
    }

    pub fn pile_timesteps(&self) -> Vec<usize> {
        self.pile.iter().map(|e| e.timestep).collect()
    }

    pub fn pile_latents(&self) -> Vec<Vec<f64>> {
        self.pile.iter().map(|e| e.latent.clone()).collect()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn warmup_remaining(&self) -> usize {
        self.warmup_remaining
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn popped(&self) -> u64 {
        self.popped
    }

    pub fn denoiser_calls(&self) -> u64 {
        self.denoiser_calls
    }

    pub fn is_empty(&self) -> bool {
        self.pile.is_empty()
    }

    /// Whether a step may push a new group: true while warming up or once the
    /// head group is about to leave.
    pub fn accepts_push(&self) -> bool {
        let g = self.cfg.group_size();
        let leaving = self.pile.front().is_some_and(|e| e.timestep <= self.cfg.level_spacing());
        let after_pop = if leaving { self.pile.len().saturating_sub(g) } else { self.pile.len() };
        after_pop + g <= self.cfg.frames
    }

    fn check_cond(&self, cond: &DVector<f64>) -> Result<()> {
        if cond.len() != self.cond_dim {
            return Err(Error::shape(format!("conditioning dim {} != {}", cond.len(), self.cond_dim)));
        }
        Ok(())
    }

    fn push_noise(&mut self, conds: Vec<DVector<f64>>) -> Result<()> {
        let g = self.cfg.group_size();
        if conds.len() != g {
            return Err(Error::shape(format!("a pushed group needs {g} conditioning frames, got {}", conds.len())));
        }
        if self.pile.len() + g > self.cfg.frames {
            return Err(Error::config(format!("pile of {} frames has no room for {g} more", self.pile.len())));
        }
        let now = Instant::now();
        for cond in conds {
            self.check_cond(&cond)?;
            self.pile.push_back(PileEntry {
                index: self.pushed,
                latent: initial_noise(self.options.seed, self.pushed, self.dim),
                cond,
                timestep: self.cfg.timesteps,
                evaluations: 0,
                pushed_at: now,
            });
            self.pushed += 1;
        }
        Ok(())
    }

    /// One outer iteration: `N` denoiser calls, pop the clean head group,
    /// then push `incoming` (conditioning for `g` new frames) if given.
    pub fn step<D: Denoiser + ?Sized>(
        &mut self,
        denoiser: &D,
        incoming: Option<Vec<DVector<f64>>>,
    ) -> Result<StepOutcome> {
        let start = Instant::now();
        let n = self.pile.len();
        if n == 0 {
            return Err(Error::Exhausted("step on an empty pile".into()));
        }
        if denoiser.latent_dim() != self.dim || denoiser.cond_dim() != self.cond_dim {
            return Err(Error::shape(format!(
                "denoiser is {}/{} (latent/cond), engine is {}/{}",
                denoiser.latent_dim(),
                denoiser.cond_dim(),
                self.dim,
                self.cond_dim
            )));
        }
        let step = self.cfg.step_size();
        let t0 = self.pile.front().map(|e| e.timestep).unwrap_or(0);
        let mut denoiser_time = Duration::ZERO;

        let cond = DMatrix::from_fn(self.cond_dim, n, |k, f| self.pile[f].cond[k]);
        let mut latents = DMatrix::zeros(self.dim, n);
        let mut timesteps = vec![0usize; n];
        for _ in 0..self.cfg.steps_per_level {
            for (f, e) in self.pile.iter().enumerate() {
                latents.column_mut(f).copy_from_slice(&e.latent);
                timesteps[f] = e.timestep;
            }
            let call = Instant::now();
            let x0 = denoiser.denoise(&DenoiseRequest {
                latents: &latents,
                timesteps: &timesteps,
                cond: &cond,
                reference: self.reference.as_ref(),
            })?;
            denoiser_time += call.elapsed();
            self.denoiser_calls += 1;
            if x0.shape() != latents.shape() {
                return Err(Error::shape(format!("denoiser returned {:?} for a {:?} window", x0.shape(), latents.shape())));
            }
            for (f, e) in self.pile.iter_mut().enumerate() {
                let t_next = e.timestep - step;
                e.latent = update_frame(
                    self.options.sampler,
                    &e.latent,
                    column(&x0, f),
                    e.timestep,
                    t_next,
                    &mut self.rng,
                    &self.schedule,
                )?;
                e.timestep = t_next;
                e.evaluations += 1;
            }
        }

        let mut events = Vec::new();
        while self.pile.front().is_some_and(|e| e.timestep == 0) {
            let e = self.pile.pop_front().expect("non-empty");
            events.push(FrameEvent {
                index: e.index,
                latent: e.latent,
                wall_time: e.pushed_at.elapsed(),
                evaluations: e.evaluations,
            });
        }
        self.popped += events.len() as u64;

        if let Some(conds) = incoming {
            self.push_noise(conds)?;
            if self.warmup_remaining > 0 && events.is_empty() {
                self.warmup_remaining -= 1;
            }
        }
        let record = StepRecord {
            iteration: self.iteration,
            pile_len: n,
            popped: events.len(),
            t0,
            step_wall_nanos: start.elapsed().as_nanos() as u64,
            denoiser_nanos: denoiser_time.as_nanos() as u64,
        };
        self.iteration += 1;
        Ok(StepOutcome { events, record })
    }
}

/// Everything a finished stream produced.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub frames: Vec<FrameEvent>,
    pub records: Vec<StepRecord>,
}

impl StreamOutput {
    pub fn latents(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.latent.clone()).collect()
    }
}

/// Run `frames` frames through a fresh engine and drain it.
///
/// `cond_stream` yields one conditioning vector per frame, in frame order.
pub fn run_stream<D, I>(
    cfg: &ScheduleConfig,
    schedule: Arc<NoiseSchedule>,
    options: &EngineOptions,
    denoiser: &D,
    cond_stream: I,
    frames: usize,
    reference: Option<DVector<f64>>,
) -> Result<StreamOutput>
where
    D: Denoiser + ?Sized,
    I: IntoIterator<Item = DVector<f64>>,
{
    cfg.validate()?;
    let g = cfg.group_size();
    if frames == 0 || frames % g != 0 {
        return Err(Error::config(format!("stream length L = {frames} must be a positive multiple of g = {g}")));
    }
    if matches!(options.startup, Startup::StillImage(_)) && frames < cfg.frames {
        return Err(Error::config(format!(
            "still-image startup fills {} frames but the stream has only {frames}",
            cfg.frames
        )));
    }
    let mut cond_stream = cond_stream.into_iter();
    let mut take = |count: usize| -> Result<Vec<DVector<f64>>> {
        let batch: Vec<_> = cond_stream.by_ref().take(count).collect();
        if batch.len() != count {
            return Err(Error::Exhausted(format!("conditioning stream ended after {} of {count} frames", batch.len())));
        }
        Ok(batch)
    };
    let first = match options.startup {
        Startup::Soft => g,
        Startup::StillImage(_) => cfg.frames,
    };
    let mut engine = Engine::init(
        *cfg,
        schedule,
        options.clone(),
        denoiser.latent_dim(),
        denoiser.cond_dim(),
        reference,
        take(first)?,
    )?;
    let mut out = Vec::with_capacity(frames);
    let mut records = Vec::new();
    while !engine.is_empty() {
        let incoming = if (engine.pushed() as usize) < frames && engine.accepts_push() {
            Some(take(g)?)
        } else {
            None
        };
        let outcome = engine.step(denoiser, incoming)?;
        out.extend(outcome.events);
        records.push(outcome.record);
    }
    Ok(StreamOutput { frames: out, records })
}

/// Unconditioned stream: an endless supply of empty conditioning vectors.
pub fn no_conditioning() -> impl Iterator<Item = DVector<f64>> {
    std::iter::repeat_with(|| DVector::zeros(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{OracleMode, StandardNormalDenoiser};

    fn parts(dim: usize) -> (Arc<NoiseSchedule>, StandardNormalDenoiser) {
        let s = Arc::new(NoiseSchedule::stable_diffusion());
        let d = StandardNormalDenoiser::new(Arc::clone(&s), dim, OracleMode::Transport);
        (s, d)
    }

    fn empty(n: usize) -> Vec<DVector<f64>> {
        vec![DVector::zeros(0); n]
    }

    #[test]
    fn soft_start_has_one_noise_group_at_t() {
        let (s, _) = parts(8);
        let e = Engine::init(ScheduleConfig::default(), s, EngineOptions::default(), 8, 0, None, empty(4)).unwrap();
        assert_eq!(e.pile_len(), 4);
        assert_eq!(e.pile_timesteps(), vec![1000; 4]);
        assert_eq!(e.warmup_remaining(), 3);
    }

    #[test]
    fn single_group_starts_full() {
        let (s, _) = parts(2);
        let cfg = ScheduleConfig::new(4, 1, 1, 1000).unwrap();
        let e = Engine::init(cfg, s, EngineOptions::default(), 2, 0, None, empty(4)).unwrap();
        assert_eq!(e.warmup_remaining(), 0);
        assert_eq!(e.pile_len(), 4);
    }

    #[test]
    fn same_seed_same_pile() {
        let (s, _) = parts(8);
        let opts = EngineOptions { seed: 42, ..Default::default() };
        let cfg = ScheduleConfig::default();
        let a = Engine::init(cfg, Arc::clone(&s), opts.clone(), 8, 0, None, empty(4)).unwrap();
        let b = Engine::init(cfg, s, opts, 8, 0, None, empty(4)).unwrap();
        assert_eq!(a.pile_latents(), b.pile_latents());
    }

    #[test]
    fn first_pop_after_lifetime_calls() {
        let (s, d) = parts(8);
        let cfg = ScheduleConfig::default();
        let mut e = Engine::init(cfg, s, EngineOptions::default(), 8, 0, None, empty(4)).unwrap();
        let mut lens = Vec::new();
        for it in 1..=6 {
            lens.push(e.pile_len());
            let out = e.step(&d, Some(empty(4))).unwrap();
            if it < 4 {
                assert!(out.events.is_empty());
            } else {
                assert_eq!(out.events.len(), 4);
                assert!(out.events.iter().all(|ev| ev.evaluations == 4));
            }
        }
        assert_eq!(lens, vec![4, 8, 12, 16, 16, 16]);
        assert_eq!(e.denoiser_calls(), 6);
    }

    #[test]
    fn degenerate_single_group_pops_everything_each_step() {
        let (s, d) = parts(3);
        let cfg = ScheduleConfig::new(8, 1, 1, 1000).unwrap();
        let out = run_stream(&cfg, s, &EngineOptions::default(), &d, no_conditioning(), 32, None).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().all(|r| r.popped == 8));
    }

    #[test]
    fn sixteen_frames_take_seven_steps() {
        let (s, d) = parts(8);
        let out =
            run_stream(&ScheduleConfig::default(), s, &EngineOptions::default(), &d, no_conditioning(), 16, None)
                .unwrap();
        assert_eq!(out.frames.len(), 16);
        assert_eq!(out.records.len(), 7);
        let idx: Vec<u64> = out.frames.iter().map(|f| f.index).collect();
        assert_eq!(idx, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn one_group_stream_is_sequential_denoising() {
        let (s, d) = parts(2);
        let cfg = ScheduleConfig::new(16, 4, 2, 1000).unwrap();
        let out = run_stream(&cfg, s, &EngineOptions::default(), &d, no_conditioning(), 4, None).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().all(|r| r.pile_len == 4));
        assert!(out.frames.iter().all(|f| f.evaluations == 8));
    }

    #[test]
    fn bad_lengths_are_rejected() {
        let (s, d) = parts(2);
        let cfg = ScheduleConfig::default();
        let err = run_stream(&cfg, Arc::clone(&s), &EngineOptions::default(), &d, no_conditioning(), 10, None);
        assert!(matches!(err, Err(Error::Config(_))));
        let short = std::iter::repeat_with(|| DVector::zeros(0)).take(6);
        let err = run_stream(&cfg, s, &EngineOptions::default(), &d, short, 8, None);
        assert!(matches!(err, Err(Error::Exhausted(_))));
    }
}
