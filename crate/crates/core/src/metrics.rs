//! Pipeline measurements: latency and throughput, group-boundary jitter,
//! long-run drift, and streamed vs offline agreement.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{sample_window, uniform_timesteps, GaussianOracle, GaussianPrior, NoiseSchedule, OracleMode, SamplerKind};
use crate::engine::{initial_noise, no_conditioning, run_stream, EngineOptions, StepRecord};
use crate::error::{Error, Result};
use crate::rng::sub_rng;
use crate::temporal::ScheduleConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterTiming {
    pub iteration: u64,
    pub pile_len: usize,
    pub step_nanos: u64,
    pub denoiser_nanos: u64,
    pub overhead_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub iterations: usize,
    /// Denoiser calls made before the first frame popped, inclusive.
    pub first_frame_latency_iters: u64,
    pub first_frame_latency_wall_nanos: u64,
    /// Clean frames per denoiser call in steady state.
    pub throughput_frames_per_iter: f64,
    /// Mean of step time minus denoiser time over steady-state steps.
    pub engine_overhead_per_iter_nanos: f64,
    pub denoiser_per_iter_nanos: f64,
    pub timings: Vec<IterTiming>,
}

/// A step is steady when the pile was full and popped exactly one group.
fn is_steady(r: &StepRecord, cfg: &ScheduleConfig) -> bool {
    r.pile_len == cfg.frames && r.popped == cfg.group_size()
}

/// Run an `frames`-frame stream and time it. Counts are deterministic; wall
/// times are not.
pub fn bench_pipeline<D: Denoiser + ?Sized>(
    cfg: &ScheduleConfig,
    schedule: Arc<NoiseSchedule>,
    denoiser: &D,
    frames: usize,
    seed: u64,
) -> Result<BenchReport> {
    let options = EngineOptions { seed, ..Default::default() };
    let out = run_stream(cfg, schedule, &options, denoiser, no_conditioning(), frames, None)?;
    let n = cfg.steps_per_level as u64;
    let first = out
        .records
        .iter()
        .position(|r| r.popped > 0)
        .ok_or_else(|| Error::Exhausted("stream produced no frames".into()))?;
    let first_frame_latency_iters = (first as u64 + 1) * n;
    let first_frame_latency_wall_nanos = out.frames[0].wall_time.as_nanos() as u64;

    let timings: Vec<IterTiming> = out
        .records
        .iter()
        .map(|r| IterTiming {
            iteration: r.iteration,
            pile_len: r.pile_len,
            step_nanos: r.step_wall_nanos,
            denoiser_nanos: r.denoiser_nanos,
            overhead_nanos: r.step_wall_nanos.saturating_sub(r.denoiser_nanos),
        })
        .collect();
    let steady: Vec<(&StepRecord, &IterTiming)> =
        out.records.iter().zip(&timings).filter(|(r, _)| is_steady(r, cfg)).collect();
    let (throughput, overhead, denoise) = if steady.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let popped: usize = steady.iter().map(|(r, _)| r.popped).sum();
        let calls = steady.len() as f64 * n as f64;
        let m = steady.len() as f64;
        (
            popped as f64 / calls,
            steady.iter().map(|(_, t)| t.overhead_nanos as f64).sum::<f64>() / m,
            steady.iter().map(|(_, t)| t.denoiser_nanos as f64).sum::<f64>() / m,
        )
    };
    Ok(BenchReport {
        frames: out.frames.len(),
        iterations: out.records.len(),
        first_frame_latency_iters,
        first_frame_latency_wall_nanos,
        throughput_frames_per_iter: throughput,
        engine_overhead_per_iter_nanos: overhead,
        denoiser_per_iter_nanos: denoise,
        timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterReport {
    /// Mean squared difference between frame `k` and `k - 1` for `k % g == 0`.
    pub boundary_msd: f64,
    /// The same over all other `k`.
    pub interior_msd: f64,
    /// `boundary_msd / interior_msd`; 1 when both are zero.
    pub ratio: f64,
}

fn msd(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Boundary-to-interior ratio of consecutive-frame squared differences, with
/// index classes taken from the global frame index modulo `g`.
pub fn jitter_ratio(frames: &[Vec<f64>], g: usize) -> Result<JitterReport> {
    if g < 2 {
        return Err(Error::config("jitter needs groups of at least two frames"));
    }
    if frames.len() < 2 * g {
        return Err(Error::Exhausted(format!("jitter needs at least {} frames, got {}", 2 * g, frames.len())));
    }
    let (mut b, mut nb, mut i, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for k in 1..frames.len() {
        let d = msd(&frames[k], &frames[k - 1]);
        if k % g == 0 {
            b += d;
            nb += 1;
        } else {
            i += d;
            ni += 1;
        }
    }
    let (boundary_msd, interior_msd) = (b / nb as f64, i / ni as f64);
    let ratio = if boundary_msd == 0.0 && interior_msd == 0.0 { 1.0 } else { boundary_msd / interior_msd };
    Ok(JitterReport { boundary_msd, interior_msd, ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub window: usize,
    /// Frame index at the centre of each window.
    pub centers: Vec<f64>,
    /// Window sample mean minus prior marginal mean, averaged over coordinates.
    pub mean_deviation: Vec<f64>,
    /// Window sample variance minus prior marginal variance, averaged over coordinates.
    pub variance_deviation: Vec<f64>,
    /// Norm of the window mean over `sqrt(d)`.
    pub mean_norm: Vec<f64>,
    pub max_deviation: f64,
    pub max_deviation_frame: usize,
    /// Kendall rank correlation of each deviation series with time.
    pub mean_tau: f64,
    pub variance_tau: f64,
    /// Least-squares slope of `mean_deviation` per frame.
    pub mean_slope: f64,
}

/// Kendall's tau-b between `x` and `y`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap_or(std::cmp::Ordering::Equal);
            use std::cmp::Ordering::Equal;
            match (dx, dy) {
                (Equal, Equal) => {}
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let denom = (((concordant + discordant + ties_x) * (concordant + discordant + ties_y)) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) as f64 / denom
    }
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Windowed mean/variance of a long stream against the prior's per-frame
/// marginals (taken from the prior's first frame).
pub fn drift(frames: &[Vec<f64>], prior: &GaussianPrior, window: usize) -> Result<DriftReport> {
    if window < 2 || frames.is_empty() || frames.len() % window != 0 {
        return Err(Error::config(format!("window {window} must be at least 2 and divide {} frames", frames.len())));
    }
    let d = prior.dim();
    if frames.iter().any(|f| f.len() != d) {
        return Err(Error::shape(format!("frames must have dimension {d}")));
    }
    let mu = &prior.marginal_mean()[..d];
    let var = &prior.marginal_variance()[..d];
    let mut report = DriftReport {
        window,
        centers: vec![],
        mean_deviation: vec![],
        variance_deviation: vec![],
        mean_norm: vec![],
        max_deviation: 0.0,
        max_deviation_frame: 0,
        mean_tau: 0.0,
        variance_tau: 0.0,
        mean_slope: 0.0,
    };
    let w = window as f64;
    for (k, chunk) in frames.chunks(window).enumerate() {
        let mut mean_dev = 0.0;
        let mut var_dev = 0.0;
        let mut norm2 = 0.0;
        for c in 0..d {
            let m = chunk.iter().map(|f| f[c]).sum::<f64>() / w;
            let v = chunk.iter().map(|f| (f[c] - m) * (f[c] - m)).sum::<f64>() / (w - 1.0);
            mean_dev += (m - mu[c]) / d as f64;
            var_dev += (v - var[c]) / d as f64;
            norm2 += m * m;
        }
        let start = k * window;
        report.centers.push(start as f64 + (w - 1.0) / 2.0);
        report.mean_deviation.push(mean_dev);
        report.variance_deviation.push(var_dev);
        report.mean_norm.push((norm2 / d as f64).sqrt());
        let dev = mean_dev.abs().max(var_dev.abs());
        if dev > report.max_deviation {
            report.max_deviation = dev;
            report.max_deviation_frame = start;
        }
    }
    report.mean_tau = kendall_tau(&report.centers, &report.mean_deviation);
    report.variance_tau = kendall_tau(&report.centers, &report.variance_deviation);
    report.mean_slope = ols_slope(&report.centers, &report.mean_deviation);
    Ok(report)
}

/// Per-frame mean squared distance between a streamed run and an offline
/// joint denoise of all `frames` frames.
///
/// Both use the posterior-mean oracle with DDIM, the same per-frame initial
/// noise and the same number of solver steps (`G N`). `prior` must cover at
/// least `frames` frames; the streaming oracle sees its leading `K`-frame
/// block. Conditioning and references are not used.
pub fn compare_streaming_offline(
    cfg: &ScheduleConfig,
    schedule: Arc<NoiseSchedule>,
    prior: &GaussianPrior,
    seed: u64,
    frames: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if prior.frames() < frames || prior.frames() < cfg.frames {
        return Err(Error::config(format!(
            "prior covers {} frames; comparison needs {}",
            prior.frames(),
            frames.max(cfg.frames)
        )));
    }
    let d = prior.dim();
    let window = GaussianOracle::new(prior.prefix(cfg.frames)?, Arc::clone(&schedule), OracleMode::PosteriorMean);
    let options = EngineOptions { seed, sampler: SamplerKind::Ddim, ..Default::default() };
    let streamed = run_stream(cfg, Arc::clone(&schedule), &options, &window, no_conditioning(), frames, None)?;

    let joint = GaussianOracle::new(prior.prefix(frames)?, Arc::clone(&schedule), OracleMode::PosteriorMean);
    let mut init = DMatrix::zeros(d, frames);
    for f in 0..frames {
        init.column_mut(f).copy_from_slice(&initial_noise(seed, f as u64, d));
    }
    let steps = uniform_timesteps(cfg.timesteps, cfg.steps_per_level * cfg.groups);
    // DDIM draws no noise; the generator only satisfies the signature.
    let mut rng = sub_rng(seed, "offline");
    let offline =
        sample_window(&joint, &schedule, &steps, SamplerKind::Ddim, init, &DMatrix::zeros(0, frames), None, &mut rng)?;

    let mut out = vec![0.0; frames];
    for ev in &streamed.frames {
        let f = ev.index as usize;
        out[f] = msd(&ev.latent, offline.column(f).as_slice());
    }
    Ok(out)
}
