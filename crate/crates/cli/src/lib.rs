//! The `streamdiff` command line: streams, training, distillation, landmark
//! retargeting, benchmarks and the streaming-vs-offline comparison.
//!
//! Every command reads an optional TOML [`RunConfig`], applies flag
//! overrides, and writes the resolved config into each artifact it produces.
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

pub mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::json;
use streamdiff_core::diffusion::{GaussianOracle, NoiseSchedule, OracleMode, SamplerKind};
use streamdiff_core::distill::{distill, Boundary, ConsistencyWrapper};
use streamdiff_core::io::{read_frames_csv, write_frames_binary, write_frames_csv};
use streamdiff_core::landmarks::{retarget, LandmarkSet, MergeTable, RegionTransformParams};
use streamdiff_core::metrics::{bench_pipeline, compare_streaming_offline};
use streamdiff_core::rng::sub_rng;
use streamdiff_core::temporal::{schedule_dump, write_schedule_csv};
use streamdiff_core::toynet::{
    load_checkpoint, save_checkpoint, train_temporal_adaptive, AttentionMask, GaussianSequences, LossRecord,
    NoiseLayout, ToyNet, ToyNetDenoiser, ToyNetParams,
};
use streamdiff_core::{run_stream, Denoiser, EngineOptions, Error};

pub use config::{ConfigError, DenoiserChoice, FrameFormat, RunConfig, TeacherChoice};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(ConfigError::new(msg))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "streamdiff", version, about = "Streaming diffusion over staggered noise levels")]
pub struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run frames through the streaming pipeline.
    Stream(StreamArgs),
    /// Train the toy denoiser on Gaussian sequences.
    Train(TrainArgs),
    /// Distill a consistency student from a teacher.
    Distill(DistillArgs),
    /// Retarget 68-point human landmarks to the 26-point anime layout.
    Landmarks(LandmarkArgs),
    /// Time the pipeline and report latency and throughput.
    Bench(BenchArgs),
    /// Compare streamed output against offline joint denoising.
    Compare(CompareArgs),
    /// Dump per-frame timesteps of a full window.
    Schedule(ScheduleArgs),
}

/// Schedule overrides shared by several commands.
#[derive(Debug, Args, Default)]
pub struct ShapeArgs {
    /// Frames per window.
    #[arg(long = "K")]
    pub k: Option<usize>,
    /// Noise-level groups.
    #[arg(long = "G")]
    pub g: Option<usize>,
    /// Denoiser calls per noise level.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Diffusion timesteps.
    #[arg(long = "T")]
    pub t: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Stream length L; a multiple of K / G.
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserChoice>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frame file (binary or CSV per --format).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-step NDJSON metrics.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub mask: Option<MaskArg>,
    #[arg(long, value_enum)]
    pub layout: Option<LayoutArg>,
    /// Start from this checkpoint instead of a fresh init.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curve NDJSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub teacher: Option<TeacherChoice>,
    /// Teacher (toynet) and student init; fresh student when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Student checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curve NDJSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandmarkArgs {
    /// 68-point landmark JSON.
    #[arg(long)]
    pub input: PathBuf,
    /// Retargeting parameters TOML.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Merge table JSON.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 256)]
    pub frames: usize,
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserChoice>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration timings CSV.
    #[arg(long)]
    pub timings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Denoiser calls to dump; defaults to one frame lifetime (G * N).
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SamplerArg {
    Consistency,
    Ddim,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FormatArg {
    Binary,
    Csv,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MaskArg {
    Full,
    Causal,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum LayoutArg {
    Uniform,
    TemporalAdaptive,
}

/// Run a parsed command line; `Ok` carries the human summary line.
pub fn run(cli: Cli) -> CliResult<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Stream(a) => cmd_stream(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Distill(a) => cmd_distill(cfg, a),
        Command::Landmarks(a) => cmd_landmarks(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
        Command::Compare(a) => cmd_compare(cfg, a),
        Command::Schedule(a) => cmd_schedule(cfg, a),
    }
}

fn apply_shape(cfg: &mut RunConfig, s: &ShapeArgs) {
    let sec = &mut cfg.schedule;
    sec.frames = s.k.unwrap_or(sec.frames);
    sec.groups = s.g.unwrap_or(sec.groups);
    sec.steps_per_level = s.n.unwrap_or(sec.steps_per_level);
    sec.timesteps = s.t.unwrap_or(sec.timesteps);
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

/// NDJSON file whose first record is `{"config": ...}`.
fn write_ndjson_with_config<T: Serialize>(path: &Path, cfg: &RunConfig, records: &[T]) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, &json!({ "config": cfg.to_json() }))?;
    w.write_all(b"\n")?;
    streamdiff_core::io::write_ndjson(w, records)?;
    Ok(())
}

/// Pretty JSON to `path`, or stdout when no path is given.
fn write_json(path: Option<&Path>, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read_csv(path: &Path) -> CliResult<(usize, Vec<Vec<f64>>)> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("cannot open {}: {e}", path.display())))?;
    Ok(read_frames_csv(BufReader::new(f))?)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_net(cfg: &RunConfig) -> CliResult<(ToyNet, serde_json::Value)> {
    let path = cfg
        .model
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("model.checkpoint (or --checkpoint) is required for the toynet denoiser"))?;
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
    }
    let (net, manifest) = load_checkpoint(path)?;
    if net.dims().latent != cfg.oracle.dim {
        return Err(CliError::config(format!(
            "checkpoint latent dimension {} differs from oracle.dim = {}",
            net.dims().latent,
            cfg.oracle.dim
        )));
    }
    Ok((net, manifest.extra))
}

/// The configured denoiser. Distilled checkpoints are wrapped so they obey
/// the consistency boundary.
fn build_denoiser(cfg: &RunConfig, schedule: &Arc<NoiseSchedule>, mode: OracleMode) -> CliResult<Box<dyn Denoiser>> {
    Ok(match cfg.engine.denoiser {
        DenoiserChoice::Oracle => {
            let prior = cfg.prior(cfg.schedule.frames)?;
            Box::new(
                GaussianOracle::new(prior, Arc::clone(schedule), mode)
                    .with_conditioning(cfg.model.cond, cfg.oracle.cond_gain),
            )
        }
        DenoiserChoice::Toynet => {
            let (net, extra) = load_net(cfg)?;
            let inner = ToyNetDenoiser::new(net, Arc::clone(schedule));
            match extra.get("consistency") {
                Some(b) => {
                    let boundary: Boundary = serde_json::from_value(b.clone())?;
                    Box::new(ConsistencyWrapper::new(inner, schedule).with_boundary(boundary))
                }
                None => Box::new(inner),
            }
        }
    })
}

fn cmd_stream(mut cfg: RunConfig, a: StreamArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    if let Some(d) = a.denoiser {
        cfg.engine.denoiser = d;
    }
    if let Some(s) = a.sampler {
        cfg.engine.sampler = match s {
            SamplerArg::Consistency => SamplerKind::Consistency,
            SamplerArg::Ddim => SamplerKind::Ddim,
        };
    }
    if a.checkpoint.is_some() {
        cfg.model.checkpoint = a.checkpoint;
    }
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    if a.metrics.is_some() {
        cfg.io.metrics = a.metrics;
    }
    if let Some(f) = a.format {
        cfg.io.format = match f {
            FormatArg::Binary => FrameFormat::Binary,
            FormatArg::Csv => FrameFormat::Csv,
        };
    }
    cfg.revalidate()?;
    let sc = cfg.schedule_config();
    let g = sc.group_size();
    if a.frames == 0 || a.frames % g != 0 {
        return Err(CliError::config(format!(
            "--frames L = {} must be a positive multiple of the group size g = K / G = {g}",
            a.frames
        )));
    }
    let out_path = cfg.io.out.clone().ok_or_else(|| CliError::config("--out (or io.out) is required"))?;

    let schedule = Arc::new(cfg.noise_schedule());
    let den = build_denoiser(&cfg, &schedule, cfg.oracle.mode)?;
    let cond: Vec<DVector<f64>> = match &cfg.io.cond {
        Some(p) => {
            let (dim, rows) = read_csv(p)?;
            if dim != den.cond_dim() {
                return Err(CliError::config(format!("conditioning CSV has {dim} columns, denoiser expects {}", den.cond_dim())));
            }
            rows.into_iter().map(DVector::from_vec).collect()
        }
        None => vec![DVector::zeros(den.cond_dim()); a.frames],
    };
    let reference = match &cfg.io.reference {
        Some(p) => {
            let (_, rows) = read_csv(p)?;
            let first = rows.into_iter().next().ok_or_else(|| CliError::config("reference CSV has no rows"))?;
            Some(DVector::from_vec(first))
        }
        None => None,
    };
    let options = EngineOptions { seed: cfg.seed, sampler: cfg.engine.sampler, ..Default::default() };
    let out = run_stream(&sc, schedule, &options, den.as_ref(), cond, a.frames, reference)?;
    let d = den.latent_dim();
    let latents = out.latents();

    let config_json = cfg.to_json();
    match cfg.io.format {
        FrameFormat::Binary => {
            write_frames_binary(create(&out_path)?, d, &latents)?;
            let meta = json!({ "config": config_json, "dim": d, "count": latents.len() });
            std::fs::write(sidecar(&out_path), serde_json::to_string_pretty(&meta)? + "\n")?;
        }
        FrameFormat::Csv => {
            let mut w = create(&out_path)?;
            writeln!(w, "# config: {}", serde_json::to_string(&config_json)?)?;
            write_frames_csv(w, d, &latents)?;
        }
    }
    if let Some(m) = &cfg.io.metrics {
        write_ndjson_with_config(m, &cfg, &out.records)?;
    }
    Ok(format!(
        "stream: {} frames of dimension {d} in {} steps -> {}",
        latents.len(),
        out.records.len(),
        out_path.display()
    ))
}

fn data_sampler(cfg: &RunConfig) -> CliResult<GaussianSequences> {
    Ok(GaussianSequences::new(cfg.prior(cfg.schedule.frames)?)?.with_conditioning(cfg.model.cond, cfg.oracle.cond_gain))
}

fn fresh_net(cfg: &RunConfig) -> CliResult<ToyNet> {
    let params = ToyNetParams::init(cfg.dims(), &mut sub_rng(cfg.seed, "model"))?;
    Ok(ToyNet::new(params, cfg.model.mask))
}

/// Mean loss over the last tenth of the curve.
fn tail_loss(curve: &[LossRecord]) -> f64 {
    let n = (curve.len() / 10).max(1).min(curve.len());
    curve[curve.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    cfg.train.steps = a.steps.unwrap_or(cfg.train.steps);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    if let Some(m) = a.mask {
        cfg.model.mask = match m {
            MaskArg::Full => AttentionMask::Full,
            MaskArg::Causal => AttentionMask::Causal,
        };
    }
    if let Some(l) = a.layout {
        cfg.train.layout = match l {
            LayoutArg::Uniform => NoiseLayout::Uniform,
            LayoutArg::TemporalAdaptive => NoiseLayout::TemporalAdaptive,
        };
    }
    if a.checkpoint.is_some() {
        cfg.model.checkpoint = a.checkpoint;
    }
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    if a.metrics.is_some() {
        cfg.io.metrics = a.metrics;
    }
    cfg.revalidate()?;
    let out_path = cfg.io.out.clone().ok_or_else(|| CliError::config("--out (or io.out) is required"))?;

    let (mut net, prior_steps) = match &cfg.model.checkpoint {
        Some(_) => {
            let (mut net, _) = load_net(&cfg)?;
            net.mask = cfg.model.mask;
            let steps = load_checkpoint(cfg.model.checkpoint.as_ref().expect("checked"))?.1.steps;
            (net, steps)
        }
        None => (fresh_net(&cfg)?, 0),
    };
    let schedule = cfg.noise_schedule();
    let curve = train_temporal_adaptive(&mut net, &data_sampler(&cfg)?, &schedule, &cfg.schedule_config(), &cfg.train_config())?;
    let steps = prior_steps + curve.len() as u64;
    save_checkpoint(&out_path, &net, cfg.seed, steps, json!({ "config": cfg.to_json() }))?;
    if let Some(m) = &cfg.io.metrics {
        write_ndjson_with_config(m, &cfg, &curve)?;
    }
    Ok(match curve.first() {
        Some(first) => format!(
            "train: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
            curve.len(),
            first.loss,
            tail_loss(&curve),
            out_path.display()
        ),
        None => format!("train: 0 steps, checkpoint {}", out_path.display()),
    })
}

fn cmd_distill(mut cfg: RunConfig, a: DistillArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    cfg.distill.steps = a.steps.unwrap_or(cfg.distill.steps);
    cfg.distill.omega = a.omega.unwrap_or(cfg.distill.omega);
    cfg.distill.lr = a.lr.unwrap_or(cfg.distill.lr);
    cfg.distill.teacher = a.teacher.unwrap_or(cfg.distill.teacher);
    if a.checkpoint.is_some() {
        cfg.model.checkpoint = a.checkpoint;
    }
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    if a.metrics.is_some() {
        cfg.io.metrics = a.metrics;
    }
    cfg.revalidate()?;
    let out_path = cfg.io.out.clone().ok_or_else(|| CliError::config("--out (or io.out) is required"))?;

    let schedule = Arc::new(cfg.noise_schedule());
    let student = match cfg.model.checkpoint {
        Some(_) => load_net(&cfg)?.0,
        None => fresh_net(&cfg)?,
    };
    let teacher: Box<dyn Denoiser> = match cfg.distill.teacher {
        TeacherChoice::Oracle => Box::new(
            GaussianOracle::new(cfg.prior(cfg.schedule.frames)?, Arc::clone(&schedule), OracleMode::PosteriorMean)
                .with_conditioning(cfg.model.cond, cfg.oracle.cond_gain),
        ),
        TeacherChoice::Toynet => Box::new(ToyNetDenoiser::new(load_net(&cfg)?.0, Arc::clone(&schedule))),
    };
    let dc = cfg.distill_config();
    let (state, curve) =
        distill(teacher.as_ref(), student, &data_sampler(&cfg)?, &schedule, cfg.schedule.frames, &dc)?;
    let extra = json!({ "config": cfg.to_json(), "consistency": dc.boundary });
    save_checkpoint(&out_path, &state.online, cfg.seed, state.steps() as u64, extra)?;
    if let Some(m) = &cfg.io.metrics {
        write_ndjson_with_config(m, &cfg, &curve)?;
    }
    let last = if curve.is_empty() { f64::NAN } else { tail_loss(&curve) };
    Ok(format!(
        "distill: {} steps at omega {}, final loss {last:.3e}, student {}",
        curve.len(),
        cfg.distill.omega,
        out_path.display()
    ))
}

fn cmd_landmarks(mut cfg: RunConfig, a: LandmarkArgs) -> CliResult<String> {
    if a.params.is_some() {
        cfg.landmarks.params = a.params;
    }
    if a.table.is_some() {
        cfg.landmarks.table = a.table;
    }
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    cfg.revalidate()?;
    let src = LandmarkSet::load(&a.input).map_err(|e| CliError::Runtime(format!("{}: {e}", a.input.display())))?;
    let params = match &cfg.landmarks.params {
        Some(p) => RegionTransformParams::load(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => RegionTransformParams::default(),
    };
    let table = match &cfg.landmarks.table {
        Some(p) => MergeTable::load(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
        None => MergeTable::default(),
    };
    let out = retarget(&src, &table, &params)?;
    let value = json!({ "config": cfg.to_json(), "scheme": out.scheme, "points": out.points });
    write_json(cfg.io.out.as_deref(), &value)?;
    Ok(format!(
        "landmarks: {} points -> {} points{}",
        src.points.len(),
        out.points.len(),
        cfg.io.out.as_ref().map(|p| format!(", {}", p.display())).unwrap_or_default()
    ))
}

fn cmd_bench(mut cfg: RunConfig, a: BenchArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    if let Some(d) = a.denoiser {
        cfg.engine.denoiser = d;
    }
    if a.checkpoint.is_some() {
        cfg.model.checkpoint = a.checkpoint;
    }
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    cfg.revalidate()?;
    let sc = cfg.schedule_config();
    if a.frames == 0 || a.frames % sc.group_size() != 0 {
        return Err(CliError::config(format!(
            "--frames {} must be a positive multiple of the group size {}",
            a.frames,
            sc.group_size()
        )));
    }
    let schedule = Arc::new(cfg.noise_schedule());
    let den = build_denoiser(&cfg, &schedule, cfg.oracle.mode)?;
    let report = bench_pipeline(&sc, schedule, den.as_ref(), a.frames, cfg.seed)?;
    if let Some(p) = &a.timings {
        let mut w = create(p)?;
        writeln!(w, "# config: {}", serde_json::to_string(&cfg.to_json())?)?;
        writeln!(w, "iteration,pile_len,step_nanos,denoiser_nanos,overhead_nanos")?;
        for t in &report.timings {
            writeln!(w, "{},{},{},{},{}", t.iteration, t.pile_len, t.step_nanos, t.denoiser_nanos, t.overhead_nanos)?;
        }
        w.flush()?;
    }
    write_json(cfg.io.out.as_deref(), &json!({ "config": cfg.to_json(), "report": report }))?;
    Ok(format!(
        "bench: first frame after {} denoiser calls, {:.3} frames per call, engine overhead {:.1} us per step",
        report.first_frame_latency_iters,
        report.throughput_frames_per_iter,
        report.engine_overhead_per_iter_nanos / 1e3
    ))
}

fn cmd_compare(mut cfg: RunConfig, a: CompareArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    cfg.revalidate()?;
    let sc = cfg.schedule_config();
    if a.frames == 0 || a.frames % sc.group_size() != 0 {
        return Err(CliError::config(format!(
            "--frames {} must be a positive multiple of the group size {}",
            a.frames,
            sc.group_size()
        )));
    }
    let prior = cfg.prior(a.frames.max(sc.frames))?;
    let mse = compare_streaming_offline(&sc, Arc::new(cfg.noise_schedule()), &prior, cfg.seed, a.frames)?;
    let mean = mse.iter().sum::<f64>() / mse.len() as f64;
    let variance = cfg.oracle.variance;
    write_json(
        cfg.io.out.as_deref(),
        &json!({
            "config": cfg.to_json(),
            "per_frame_mse": mse,
            "mean_mse": mean,
            "prior_marginal_variance": variance,
            "relative_mse": mean / variance,
        }),
    )?;
    Ok(format!(
        "compare: mean per-frame MSE {mean:.4e} over {} frames ({:.2}% of prior variance)",
        mse.len(),
        100.0 * mean / variance
    ))
}

fn cmd_schedule(mut cfg: RunConfig, a: ScheduleArgs) -> CliResult<String> {
    apply_shape(&mut cfg, &a.shape);
    if a.out.is_some() {
        cfg.io.out = a.out;
    }
    cfg.revalidate()?;
    let sc = cfg.schedule_config();
    let iterations = a.iterations.unwrap_or(sc.lifetime());
    let rows = schedule_dump(&sc, iterations);
    let header = format!("# config: {}\n", serde_json::to_string(&cfg.to_json())?);
    match &cfg.io.out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(header.as_bytes())?;
            write_schedule_csv(w, &rows)?;
        }
        None => {
            let mut w = std::io::stdout().lock();
            w.write_all(header.as_bytes())?;
            write_schedule_csv(&mut w, &rows)?;
        }
    }
    Ok(format!("schedule: {iterations} denoiser calls x {} frames", sc.frames))
}
