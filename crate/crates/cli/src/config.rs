//! Run configuration: one TOML file, every section optional.
//!
//! ```toml
//! seed = 7
//!
//! [schedule]
//! frames = 16
//! groups = 4
//!
//! [distill]
//! omega = 2.5
//! ```
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags. Unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streamdiff_core::diffusion::{GaussianPrior, NoiseSchedule, OracleMode, SamplerKind};
use streamdiff_core::distill::{Boundary, DistillConfig};
use streamdiff_core::temporal::ScheduleConfig;
use streamdiff_core::toynet::{AdamWConfig, AttentionMask, NoiseLayout, ToyNetDims, TrainConfig};

/// A configuration problem, located at a line of the config file when it
/// came from one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { path: None, line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.path, self.line) {
            (Some(p), Some(l)) => write!(f, "{}:{l}: {}", p.display(), self.message),
            (Some(p), None) => write!(f, "{}: {}", p.display(), self.message),
            (None, Some(l)) => write!(f, "line {l}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserChoice {
    #[default]
    Oracle,
    Toynet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub frames: usize,
    pub groups: usize,
    pub steps_per_level: usize,
    pub timesteps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let d = ScheduleConfig::default();
        Self { frames: d.frames, groups: d.groups, steps_per_level: d.steps_per_level, timesteps: d.timesteps }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub sampler: SamplerKind,
    pub denoiser: DenoiserChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub latent: usize,
    pub cond: usize,
    pub hidden: usize,
    pub ff: usize,
    pub temb: usize,
    pub mask: AttentionMask,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ToyNetDims::default();
        Self {
            latent: d.latent,
            cond: d.cond,
            hidden: d.hidden,
            ff: d.ff,
            temb: d.temb,
            mask: AttentionMask::Full,
            checkpoint: None,
        }
    }
}

/// AR(1) Gaussian prior over frames, identical in every latent coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub rho: f64,
    pub dim: usize,
    pub mean: f64,
    pub variance: f64,
    pub mode: OracleMode,
    /// Mean shift per unit of conditioning when `model.cond == oracle.dim`.
    pub cond_gain: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { rho: 0.95, dim: 8, mean: 0.0, variance: 1.0, mode: OracleMode::Transport, cond_gain: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub layout: NoiseLayout,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            lr: d.optimizer.lr,
            weight_decay: d.optimizer.weight_decay,
            layout: d.layout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TeacherChoice {
    #[default]
    Oracle,
    Toynet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub steps: usize,
    pub batch_size: usize,
    pub ema_rate: f64,
    pub omega: f64,
    pub huber_c: f64,
    pub solver_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher: TeacherChoice,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            ema_rate: d.ema_rate,
            omega: d.omega,
            huber_c: d.huber_c,
            solver_steps: d.solver_steps,
            lr: d.optimizer.lr,
            weight_decay: d.optimizer.weight_decay,
            teacher: TeacherChoice::Oracle,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandmarkSection {
    /// Retargeting parameters (TOML); identity when absent.
    pub params: Option<PathBuf>,
    /// Merge table (JSON); the bundled table when absent.
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub format: FrameFormat,
    /// Per-frame conditioning as CSV; zeros when absent.
    pub cond: Option<PathBuf>,
    /// Reference latent: first frame of a CSV.
    pub reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub engine: EngineSection,
    pub model: ModelSection,
    pub oracle: OracleSection,
    pub train: TrainSection,
    pub distill: DistillSection,
    pub landmarks: LandmarkSection,
    pub io: IoSection,
}

/// A failed check: the dotted key it belongs to and what is wrong.
type Violation = (&'static str, String);

fn check(ok: bool, key: &'static str, msg: impl FnOnce() -> String) -> Result<(), Violation> {
    if ok {
        Ok(())
    } else {
        Err((key, msg()))
    }
}

impl RunConfig {
    /// Parse and validate. Errors carry the line of the offending key.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: None,
            line: e.span().map(|s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            path: None,
            line: locate_key(text, key),
            message: format!("{key}: {message}"),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError { path: Some(path.to_path_buf()), ..e })
    }

    /// Re-check after flag overrides; errors name the key but have no line.
    pub fn revalidate(&self) -> Result<(), ConfigError> {
        self.validate().map_err(|(key, message)| ConfigError::new(format!("{key}: {message}")))
    }

    fn validate(&self) -> Result<(), Violation> {
        let s = &self.schedule;
        check(s.frames > 0, "schedule.frames", || "must be positive".into())?;
        check(s.groups > 0, "schedule.groups", || "must be positive".into())?;
        check(s.frames % s.groups == 0, "schedule.groups", || {
            format!("groups G = {} must divide frames K = {}", s.groups, s.frames)
        })?;
        check(s.steps_per_level > 0, "schedule.steps_per_level", || "must be >= 1".into())?;
        let life = s.groups * s.steps_per_level;
        check(life <= s.timesteps && s.timesteps % life == 0, "schedule.timesteps", || {
            format!("G * N = {life} must divide T = {}", s.timesteps)
        })?;
        NoiseSchedule::scaled_linear(s.timesteps, 0.00085, 0.012)
            .map_err(|e| ("schedule.timesteps", e.to_string()))?;

        let m = &self.model;
        check(m.latent > 0, "model.latent", || "must be positive".into())?;
        check(m.hidden > 0, "model.hidden", || "must be positive".into())?;
        check(m.ff > 0, "model.ff", || "must be positive".into())?;
        check(m.temb > 0 && m.temb % 2 == 0, "model.temb", || format!("must be even and positive, got {}", m.temb))?;

        let o = &self.oracle;
        check(o.dim == m.latent, "oracle.dim", || {
            format!("oracle dimension {} differs from model.latent = {}", o.dim, m.latent)
        })?;
        check(o.rho.is_finite() && o.rho.abs() < 1.0, "oracle.rho", || format!("must lie in (-1, 1), got {}", o.rho))?;
        check(o.variance.is_finite() && o.variance > 0.0, "oracle.variance", || "must be positive".into())?;
        check(o.mean.is_finite(), "oracle.mean", || "must be finite".into())?;
        check(o.cond_gain.is_finite(), "oracle.cond_gain", || "must be finite".into())?;

        let t = &self.train;
        check(t.batch_size > 0, "train.batch_size", || "must be positive".into())?;
        check(t.lr.is_finite() && t.lr >= 0.0, "train.lr", || "must be finite and non-negative".into())?;
        check(t.weight_decay.is_finite() && t.weight_decay >= 0.0, "train.weight_decay", || {
            "must be finite and non-negative".into()
        })?;

        let d = &self.distill;
        check((2.0..=3.5).contains(&d.omega), "distill.omega", || format!("must lie in [2.0, 3.5], got {}", d.omega))?;
        check(d.ema_rate > 0.0 && d.ema_rate <= 1.0, "distill.ema_rate", || {
            format!("must lie in (0, 1], got {}", d.ema_rate)
        })?;
        check(d.huber_c > 0.0 && d.huber_c.is_finite(), "distill.huber_c", || "must be positive".into())?;
        check(d.solver_steps > 0 && s.timesteps % d.solver_steps == 0, "distill.solver_steps", || {
            format!("must divide T = {}, got {}", s.timesteps, d.solver_steps)
        })?;
        check(d.batch_size > 0, "distill.batch_size", || "must be positive".into())?;
        check(d.lr.is_finite() && d.lr >= 0.0, "distill.lr", || "must be finite and non-negative".into())?;
        check(d.weight_decay.is_finite() && d.weight_decay >= 0.0, "distill.weight_decay", || {
            "must be finite and non-negative".into()
        })?;
        Ok(())
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        let s = &self.schedule;
        ScheduleConfig { frames: s.frames, groups: s.groups, steps_per_level: s.steps_per_level, timesteps: s.timesteps }
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::scaled_linear(self.schedule.timesteps, 0.00085, 0.012).expect("validated at parse time")
    }

    pub fn dims(&self) -> ToyNetDims {
        let m = &self.model;
        ToyNetDims { latent: m.latent, cond: m.cond, hidden: m.hidden, ff: m.ff, temb: m.temb, t_max: self.schedule.timesteps }
    }

    /// The AR(1) prior over `frames` frames.
    pub fn prior(&self, frames: usize) -> streamdiff_core::Result<GaussianPrior> {
        let o = &self.oracle;
        GaussianPrior::ar1(frames, o.dim, o.rho, o.variance, o.mean)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            optimizer: AdamWConfig { lr: t.lr, weight_decay: t.weight_decay, ..AdamWConfig::default() },
            layout: t.layout,
            seed: self.seed,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            steps: d.steps,
            batch_size: d.batch_size,
            ema_rate: d.ema_rate,
            omega: d.omega,
            huber_c: d.huber_c,
            solver_steps: d.solver_steps,
            boundary: Boundary::default(),
            optimizer: AdamWConfig { lr: d.lr, weight_decay: d.weight_decay, ..AdamWConfig::default() },
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `section.key` (or a top-level `key`), falling back to the section
/// header, or `None` when neither appears.
fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = dotted.split_once('.').unwrap_or(("", dotted));
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section {
            let name = line.split('=').next().unwrap_or("").trim().trim_matches('"');
            if line.contains('=') && name == key {
                return Some(i + 1);
            }
        }
    }
    header
}
