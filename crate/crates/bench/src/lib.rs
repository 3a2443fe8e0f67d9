//! Shared fixtures for the criterion benches.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use streamdiff_core::diffusion::NoiseSchedule;
use streamdiff_core::engine::{Engine, EngineOptions};
use streamdiff_core::temporal::ScheduleConfig;
use streamdiff_core::{DenoiseRequest, Denoiser, Result};

/// Returns its input unchanged, so timing it measures only the engine.
pub struct PassThrough {
    pub dim: usize,
}

impl Denoiser for PassThrough {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        Ok(req.latents.clone())
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }
}

/// An engine with a full pile of `frames` frames in `groups` groups, ready for
/// steady-state steps.
pub fn warm_engine<D: Denoiser + ?Sized>(frames: usize, groups: usize, denoiser: &D) -> Result<Engine> {
    let cfg = ScheduleConfig::new(frames, groups, 1, 1000)?;
    let g = cfg.group_size();
    let schedule = Arc::new(NoiseSchedule::stable_diffusion());
    let mut engine = Engine::init(cfg, schedule, EngineOptions::default(), denoiser.latent_dim(), 0, None, empty_cond(g))?;
    while engine.pile_len() < frames {
        engine.step(denoiser, Some(empty_cond(g)))?;
    }
    Ok(engine)
}

pub fn empty_cond(count: usize) -> Vec<DVector<f64>> {
    vec![DVector::zeros(0); count]
}
