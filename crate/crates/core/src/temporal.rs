//! Staggered per-frame timesteps for a window of `K` frames in `G` groups.
//!
//! Frame `i` of the window sits at `t0 + floor(i / g) * T / G`: the head
//! group is the least noisy and the next to be popped, the tail group the
//! noisiest. Each denoiser call lowers every frame by `T / (N * G)`, so a
//! frame lives for exactly `G * N` calls.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the streaming window.
///
/// `groups` is the number of noise-level groups and sets the spacing `T/G`;
/// the pop/push unit is the group *size* `g = K / G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// K: frames per temporal batch.
    pub frames: usize,
    /// G: noise-level groups.
    pub groups: usize,
    /// N: denoising iterations per noise level.
    pub steps_per_level: usize,
    /// T: total diffusion timesteps.
    pub timesteps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { frames: 16, groups: 4, steps_per_level: 1, timesteps: 1000 }
    }
}

impl ScheduleConfig {
    pub fn new(frames: usize, groups: usize, steps_per_level: usize, timesteps: usize) -> Result<Self> {
        let cfg = Self { frames, groups, steps_per_level, timesteps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { frames, groups, steps_per_level, timesteps } = *self;
        if frames == 0 || groups == 0 {
            return Err(Error::config("frames (K) and groups (G) must be positive"));
        }
        if frames % groups != 0 {
            return Err(Error::config(format!("groups G = {groups} must divide frames K = {frames}")));
        }
        if steps_per_level == 0 {
            return Err(Error::config("steps per level N must be >= 1"));
        }
        let lifetime = groups * steps_per_level;
        if lifetime > timesteps {
            return Err(Error::config(format!("G * N = {lifetime} exceeds T = {timesteps}")));
        }
        if timesteps % lifetime != 0 {
            return Err(Error::config(format!(
                "G * N = {lifetime} must divide T = {timesteps} so every timestep is an integer"
            )));
        }
        Ok(())
    }

    /// g = K / G.
    pub fn group_size(&self) -> usize {
        self.frames / self.groups
    }

    /// T / G: timestep gap between adjacent groups.
    pub fn level_spacing(&self) -> usize {
        self.timesteps / self.groups
    }

    /// T / (N G): timesteps removed per denoiser call.
    pub fn step_size(&self) -> usize {
        self.timesteps / (self.groups * self.steps_per_level)
    }

    /// G N: denoiser calls a frame sees between push and pop.
    pub fn lifetime(&self) -> usize {
        self.groups * self.steps_per_level
    }
}

/// Per-frame timesteps of a full window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTimesteps {
    pub t0: usize,
    pub vec: Vec<usize>,
}

/// Frame `i` gets `t0 + floor(i / g) * T / G`, for `1 <= t0 <= T / G`.
pub fn group_timesteps(cfg: &ScheduleConfig, t0: usize) -> Result<GroupTimesteps> {
    let spacing = cfg.level_spacing();
    if t0 < 1 || t0 > spacing {
        return Err(Error::TimestepOutOfRange { t: t0, max: spacing });
    }
    let g = cfg.group_size();
    let vec = (0..cfg.frames).map(|i| t0 + (i / g) * spacing).collect();
    Ok(GroupTimesteps { t0, vec })
}

/// Head timesteps visited between pops: `T/G, T/G - T/(NG), ..., T/(NG)`.
pub fn t0_sequence(cfg: &ScheduleConfig) -> Vec<usize> {
    let step = cfg.step_size();
    (1..=cfg.steps_per_level).rev().map(|m| m * step).collect()
}

/// One denoiser call: every timestep drops by `T / (N G)`. When the head
/// group reaches 0 it is clean and popped (`pop_count = g`), a fresh group
/// enters at `T`, and the window re-bases to `t0 = T / G`.
pub fn advance(ts: &GroupTimesteps, cfg: &ScheduleConfig) -> (GroupTimesteps, usize) {
    let step = cfg.step_size();
    if ts.t0 <= step {
        let next = group_timesteps(cfg, cfg.level_spacing()).expect("T/G is a valid t0");
        (next, cfg.group_size())
    } else {
        let next = group_timesteps(cfg, ts.t0 - step).expect("t0 stays within [1, T/G]");
        (next, 0)
    }
}

/// One row of a schedule dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub iteration: usize,
    pub frame_index: usize,
    pub timestep: usize,
}

/// Timesteps seen by each denoiser call of a full window, starting from
/// `t0 = T / G`, for `iterations` calls.
pub fn schedule_dump(cfg: &ScheduleConfig, iterations: usize) -> Vec<ScheduleRow> {
    let mut ts = group_timesteps(cfg, cfg.level_spacing()).expect("T/G is a valid t0");
    let mut rows = Vec::with_capacity(iterations * cfg.frames);
    for iteration in 0..iterations {
        rows.extend(ts.vec.iter().enumerate().map(|(frame_index, &timestep)| ScheduleRow {
            iteration,
            frame_index,
            timestep,
        }));
        ts = advance(&ts, cfg).0;
    }
    rows
}

pub fn write_schedule_csv<W: Write>(mut w: W, rows: &[ScheduleRow]) -> Result<()> {
    writeln!(w, "iteration,frame_index,timestep")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.iteration, r.frame_index, r.timestep)?;
    }
    Ok(())
}
