use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamdiff_core::denoiser::{DenoiseRequest, Denoiser};
use streamdiff_core::diffusion::{
    sample_window, uniform_timesteps, GaussianOracle, GaussianPrior, NoiseSchedule, OracleMode, Prediction,
    PredictionKind, SamplerKind,
};
use streamdiff_core::distill::*;
use streamdiff_core::rng::normal_vec;
use streamdiff_core::toynet::{AdamWConfig, GaussianSequences};
use streamdiff_core::Result;

/// Student with one free matrix per solver timestep: `x0_hat = A_t vec(x)`.
#[derive(Debug, Clone)]
struct LinearGain {
    n: usize,
    grid_step: usize,
    gains: Vec<DMatrix<f64>>,
}

impl LinearGain {
    fn zeros(n: usize, grid_step: usize, levels: usize) -> Self {
        Self { n, grid_step, gains: vec![DMatrix::zeros(n, n); levels] }
    }

    fn index(&self, t: usize) -> usize {
        assert!(t > 0 && t % self.grid_step == 0, "timestep {t} off the grid");
        t / self.grid_step - 1
    }
}

impl Trainable for LinearGain {
    fn latent_dim(&self) -> usize {
        1
    }

    fn cond_dim(&self) -> usize {
        0
    }

    fn flat_params(&self) -> Vec<f64> {
        self.gains.iter().flat_map(|g| g.iter().copied()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        for (g, chunk) in self.gains.iter_mut().zip(flat.chunks(self.n * self.n)) {
            g.copy_from_slice(chunk);
        }
        Ok(())
    }

    fn predict_x0(&self, req: &DenoiseRequest<'_>, _: &NoiseSchedule) -> Result<DMatrix<f64>> {
        let g = &self.gains[self.index(req.timesteps[0])];
        Ok(DMatrix::from_column_slice(1, self.n, (g * DVector::from_column_slice(req.latents.as_slice())).as_slice()))
    }

    fn x0_vjp(&self, req: &DenoiseRequest<'_>, _: &NoiseSchedule, upstream: &DMatrix<f64>) -> Result<Vec<f64>> {
        let k = self.index(req.timesteps[0]);
        let x = DVector::from_column_slice(req.latents.as_slice());
        let u = DVector::from_column_slice(upstream.as_slice());
        let mut out = vec![0.0; self.gains.len() * self.n * self.n];
        let block = &u * x.transpose();
        out[k * self.n * self.n..(k + 1) * self.n * self.n].copy_from_slice(block.as_slice());
        Ok(out)
    }
}

fn schedule() -> Arc<NoiseSchedule> {
    Arc::new(NoiseSchedule::stable_diffusion())
}

/// Posterior-mean gain for a zero-mean prior with every frame at `t`.
fn posterior_gain(sigma: &DMatrix<f64>, s: &NoiseSchedule, t: usize) -> DMatrix<f64> {
    let (a, sd) = s.coefficients(t).unwrap();
    let n = sigma.nrows();
    let c = sigma * (a * a) + DMatrix::identity(n, n) * (sd * sd);
    sigma * a * c.try_inverse().unwrap()
}

/// The exact consistency map of the DDIM teacher chain: `f(x, t_k) = M_k x`
/// with `M_k = S_1 S_2 ... S_k` and `S_j` the linear DDIM step from grid
/// point `j` to `j - 1`.
fn exact_consistency_student(sigma: &DMatrix<f64>, s: &NoiseSchedule, solver_steps: usize) -> LinearGain {
    let n = sigma.nrows();
    let grid = solver_grid(s.timesteps(), solver_steps);
    let b = Boundary::default();
    let mut student = LinearGain::zeros(n, grid[1], solver_steps);
    let mut m = DMatrix::identity(n, n);
    for j in 1..=solver_steps {
        let p = posterior_gain(sigma, s, grid[j]);
        let (a_prev, s_prev) = s.coefficients(grid[j - 1]).unwrap();
        let (a, sd) = s.coefficients(grid[j]).unwrap();
        let step = &p * a_prev + (DMatrix::identity(n, n) - &p * a) * (s_prev / sd);
        m *= step;
        let (cs, co) = (b.c_skip(grid[j], s.timesteps()), b.c_out(grid[j], s.timesteps()));
        student.gains[j - 1] = (&m - DMatrix::identity(n, n) * cs) / co;
    }
    student
}

fn ar1_prior(n: usize, rho: f64) -> GaussianPrior {
    GaussianPrior::ar1(n, 1, rho, 1.0, 0.0).unwrap()
}

struct Poisoned;

impl Denoiser for Poisoned {
    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(req.latents.nrows(), req.latents.ncols(), f64::NAN))
    }

    fn latent_dim(&self) -> usize {
        3
    }
}

#[test]
fn boundary_is_exact_whatever_the_inner_model() {
    let s = schedule();
    let w = ConsistencyWrapper::new(Poisoned, &s);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let x = DMatrix::from_vec(3, 4, normal_vec(&mut rng, 12)) * 1e3;
        let out = consistency_fn(&x, &[0; 4], &w, &DMatrix::zeros(0, 4), None).unwrap();
        assert_eq!(out, x);
    }
    // Mixed timesteps: only frames at zero are pinned.
    let x = DMatrix::from_element(3, 2, 1.5);
    let out = consistency_fn(&x, &[0, 10], &w, &DMatrix::zeros(0, 2), None).unwrap();
    assert_eq!(out.column(0), x.column(0));
    assert!(out.column(1).iter().all(|v| v.is_nan()));
}

#[test]
fn standard_normal_oracle_inner_interpolates_toward_scaled_input() {
    let s = schedule();
    let oracle = GaussianOracle::new(GaussianPrior::standard(3, 2), Arc::clone(&s), OracleMode::PosteriorMean);
    let w = ConsistencyWrapper::new(oracle, &s);
    let b = Boundary::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 10, 250, 600, 1000] {
        let x = DMatrix::from_vec(2, 3, normal_vec(&mut rng, 6));
        let out = consistency_fn(&x, &[t; 3], &w, &DMatrix::zeros(0, 3), None).unwrap();
        let a = s.alpha_bar(t).unwrap().sqrt();
        let expect = &x * (b.c_skip(t, 1000) + b.c_out(t, 1000) * a);
        assert!((out - expect).amax() < 1e-12, "t = {t}");
    }
}

#[test]
fn oracle_inner_is_affine_in_the_input() {
    let s = schedule();
    let prior = GaussianPrior::ar1(4, 2, 0.8, 1.5, 0.7).unwrap();
    let w = ConsistencyWrapper::new(GaussianOracle::new(prior, Arc::clone(&s), OracleMode::PosteriorMean), &s);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ts = [900, 650, 400, 150];
    let none = DMatrix::zeros(0, 4);
    for _ in 0..20 {
        let x = DMatrix::from_vec(2, 4, normal_vec(&mut rng, 8));
        let y = DMatrix::from_vec(2, 4, normal_vec(&mut rng, 8));
        let alpha: f64 = rng.random_range(-2.0..3.0);
        let mix = &x * alpha + &y * (1.0 - alpha);
        let lhs = consistency_fn(&mix, &ts, &w, &none, None).unwrap();
        let rhs = consistency_fn(&x, &ts, &w, &none, None).unwrap() * alpha
            + consistency_fn(&y, &ts, &w, &none, None).unwrap() * (1.0 - alpha);
        assert!((lhs - rhs).amax() < 1e-10);
    }
}

proptest! {
    #[test]
    fn huber_is_a_symmetric_nonnegative_distance(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        shift in prop::collection::vec(-10.0f64..10.0, 8),
        c in 1e-4f64..1.0,
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let ab = huber(&a, &b, c).unwrap();
        prop_assert_eq!(ab, huber(&b, &a, c).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(huber(&a, &a, c).unwrap(), 0.0);
        if a != b {
            prop_assert!(ab > 0.0);
        }
    }

    #[test]
    fn guidance_above_one_extrapolates_past_the_conditional(
        u in prop::collection::vec(-5.0f64..5.0, 4),
        delta in prop::collection::vec(0.01f64..5.0, 4),
        signs in prop::collection::vec(any::<bool>(), 4),
        omega in 2.0f64..3.5,
    ) {
        let c: Vec<f64> = u.iter().zip(&delta).zip(&signs).map(|((u, d), &s)| if s { u + d } else { u - d }).collect();
        let out = cfg_teacher(
            &Prediction::new(PredictionKind::Epsilon, c.clone()),
            &Prediction::new(PredictionKind::Epsilon, u.clone()),
            omega,
        ).unwrap();
        for i in 0..4 {
            let (lo, hi) = if u[i] < c[i] { (u[i], c[i]) } else { (c[i], u[i]) };
            prop_assert!(out.values[i] < lo || out.values[i] > hi);
        }
    }

    #[test]
    fn equal_predictions_pass_through_guidance(
        p in prop::collection::vec(-5.0f64..5.0, 1..6),
        omega in -4.0f64..4.0,
    ) {
        let a = Prediction::new(PredictionKind::V, p.clone());
        prop_assert_eq!(cfg_teacher(&a, &a, omega).unwrap(), a);
    }
}

#[test]
fn guidance_commutes_with_parameterization() {
    let s = schedule();
    let xt = vec![0.3, -1.2];
    let c = Prediction::new(PredictionKind::X0, vec![0.5, 0.1]);
    let u = Prediction::new(PredictionKind::X0, vec![-0.2, 0.4]);
    let t = 420;
    let eps = |p: &Prediction| {
        streamdiff_core::diffusion::convert_prediction(p, &xt, t, &s, PredictionKind::Epsilon).unwrap()
    };
    let in_x0 = eps(&cfg_teacher(&c, &u, 2.5).unwrap());
    let in_eps = cfg_teacher(&eps(&c), &eps(&u), 2.5).unwrap();
    for (a, b) in in_x0.values.iter().zip(&in_eps.values) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn batch_from_prior(prior: &GaussianPrior, count: usize, rng: &mut ChaCha8Rng) -> Vec<CleanWindow> {
    let chol = prior.covariance().clone().cholesky().unwrap().l();
    let n = prior.frames();
    (0..count)
        .map(|_| {
            let x = &chol * DVector::from_vec(normal_vec(rng, n));
            CleanWindow { x0: DMatrix::from_column_slice(1, n, x.as_slice()), cond: DMatrix::zeros(0, n), reference: None }
        })
        .collect()
}

#[test]
fn exact_consistency_function_has_zero_loss_and_gradient() {
    let s = schedule();
    let prior = ar1_prior(3, 0.9);
    let teacher = GaussianOracle::new(prior.clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    let student = exact_consistency_student(prior.covariance(), &s, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        // Fresh state each time: even a vanishing gradient moves Adam's parameters.
        let mut state = DistillState::new(student.clone(), DistillConfig::default());
        let batch = batch_from_prior(&prior, 8, &mut rng);
        let report = cd_step(&mut state, &batch, &teacher, &s, &mut rng).unwrap();
        assert!(report.loss < 1e-10, "loss {}", report.loss);
        assert!(report.grad_norm < 1e-6, "gradient norm {}", report.grad_norm);
    }
}

#[test]
fn single_window_loss_matches_scalar_recomputation() {
    let s = schedule();
    let teacher = GaussianOracle::new(GaussianPrior::standard(1, 1), Arc::clone(&s), OracleMode::PosteriorMean);
    let mut student = LinearGain::zeros(1, 10, 100);
    for (k, g) in student.gains.iter_mut().enumerate() {
        g[(0, 0)] = 0.3 + 0.001 * k as f64;
    }
    let cfg = DistillConfig { huber_c: 0.05, ..Default::default() };
    let mut state = DistillState::new(student.clone(), cfg.clone());
    let x0 = 0.8;
    let batch = vec![CleanWindow { x0: DMatrix::from_element(1, 1, x0), cond: DMatrix::zeros(0, 1), reference: None }; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Replay the documented draw order: per window, the interval index, then the noise.
    let mut replay = rng.clone();
    let b = Boundary::default();
    let mut expect = 0.0;
    for _ in 0..3 {
        let i: usize = replay.random_range(0..100);
        let eps = normal_vec(&mut replay, 1)[0];
        let (t_lo, t_hi) = (10 * i, 10 * (i + 1));
        let (a_hi, s_hi) = s.coefficients(t_hi).unwrap();
        let (a_lo, s_lo) = s.coefficients(t_lo).unwrap();
        let x_hi = a_hi * x0 + s_hi * eps;
        // Standard normal teacher: x0_hat = a x, epsilon_hat = (x - a x0_hat) / s.
        let x0_hat = a_hi * x_hi;
        let x_lo = a_lo * x0_hat + s_lo * (x_hi - a_hi * x0_hat) / s_hi;
        let online = b.c_skip(t_hi, 1000) * x_hi + b.c_out(t_hi, 1000) * student.gains[i][(0, 0)] * x_hi;
        let target = if t_lo == 0 {
            x_lo
        } else {
            b.c_skip(t_lo, 1000) * x_lo + b.c_out(t_lo, 1000) * student.gains[i - 1][(0, 0)] * x_lo
        };
        let diff: f64 = online - target;
        expect += ((diff * diff + 0.05 * 0.05).sqrt() - 0.05) / 3.0;
    }
    let report = cd_step(&mut state, &batch, &teacher, &s, &mut rng).unwrap();
    assert!((report.loss - expect).abs() < 1e-12, "{} vs {expect}", report.loss);
}

#[test]
fn ema_follows_the_scalar_recursion_and_freezes_at_rate_one() {
    let s = schedule();
    let prior = ar1_prior(2, 0.5);
    let teacher = GaussianOracle::new(prior.clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    for rate in [0.95, 0.6, 1.0] {
        let init = LinearGain::zeros(2, 10, 100);
        let cfg = DistillConfig { ema_rate: rate, optimizer: AdamWConfig { lr: 1e-2, ..Default::default() }, ..Default::default() };
        let mut state = DistillState::new(init.clone(), cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut reference = init.flat_params();
        for _ in 0..5 {
            let batch = batch_from_prior(&prior, 4, &mut rng);
            cd_step(&mut state, &batch, &teacher, &s, &mut rng).unwrap();
            let online = state.online.flat_params();
            for (r, o) in reference.iter_mut().zip(&online) {
                *r = rate * *r + (1.0 - rate) * o;
            }
            assert_eq!(state.target.flat_params(), reference);
        }
        assert_ne!(state.online.flat_params(), init.flat_params());
        if rate == 1.0 {
            assert_eq!(state.target.flat_params(), init.flat_params());
        }
    }
}

#[test]
fn zero_steps_returns_the_initial_student() {
    let s = schedule();
    let prior = ar1_prior(2, 0.5);
    let teacher = GaussianOracle::new(prior.clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    let data = GaussianSequences::new(prior).unwrap();
    let init = exact_consistency_student(&DMatrix::identity(2, 2), &s, 100);
    let cfg = DistillConfig { steps: 0, ..Default::default() };
    let (state, curve) = distill(&teacher, init.clone(), &data, &s, 2, &cfg).unwrap();
    assert!(curve.is_empty());
    assert_eq!(state.online.flat_params(), init.flat_params());
    assert_eq!(state.target.flat_params(), init.flat_params());
}

#[test]
fn invalid_configs_are_rejected() {
    let s = schedule();
    let prior = ar1_prior(2, 0.5);
    let teacher = GaussianOracle::new(prior.clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    let data = GaussianSequences::new(prior).unwrap();
    for cfg in [
        DistillConfig { ema_rate: 0.0, ..Default::default() },
        DistillConfig { huber_c: 0.0, ..Default::default() },
        DistillConfig { solver_steps: 7, ..Default::default() },
    ] {
        assert!(distill(&teacher, LinearGain::zeros(2, 10, 100), &data, &s, 2, &cfg).is_err());
    }
}

/// Mean and covariance of `count` four-step consistency samples.
fn cm_sample_moments<D: Denoiser>(w: &D, s: &NoiseSchedule, n: usize, count: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let ts = uniform_timesteps(s.timesteps(), 4);
    let mut sum = DVector::zeros(n);
    let mut outer = DMatrix::zeros(n, n);
    for _ in 0..count {
        let init = DMatrix::from_vec(1, n, normal_vec(&mut rng, n));
        let x = sample_window(w, s, &ts, SamplerKind::Consistency, init, &DMatrix::zeros(0, n), None, &mut rng).unwrap();
        let v = DVector::from_column_slice(x.as_slice());
        sum += &v;
        outer += &v * v.transpose();
    }
    let mean = sum / count as f64;
    let cov = outer / count as f64 - &mean * mean.transpose();
    (mean, cov)
}

#[test]
fn exact_student_samples_the_prior_in_four_steps() {
    let s = schedule();
    let prior = ar1_prior(3, 0.9);
    let student = exact_consistency_student(prior.covariance(), &s, 100);
    let w = ConsistencyWrapper::new(TrainableDenoiser { model: student, schedule: Arc::clone(&s) }, &s);
    let (mean, cov) = cm_sample_moments(&w, &s, 3, 20_000);
    let rel = (&cov - prior.covariance()).norm() / prior.covariance().norm();
    assert!(mean.amax() < 0.05, "mean {mean}");
    assert!(rel < 0.05, "covariance error {rel}");
}

#[test]
fn distilling_a_linear_student_recovers_the_prior() {
    let s = schedule();
    let prior = ar1_prior(3, 0.9);
    let teacher = GaussianOracle::new(prior.clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    let data = GaussianSequences::new(prior.clone()).unwrap();
    // Start from the per-frame (independent) consistency map and let distillation find the correlations.
    let init = exact_consistency_student(&DMatrix::identity(3, 3), &s, 100);
    let cfg = DistillConfig {
        steps: 3000,
        batch_size: 16,
        optimizer: AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() },
        seed: 8,
        ..Default::default()
    };
    let (state, curve) = distill(&teacher, init, &data, &s, 3, &cfg).unwrap();
    let first: f64 = curve[..100].iter().map(|r| r.loss).sum::<f64>() / 100.0;
    let last: f64 = curve[curve.len() - 100..].iter().map(|r| r.loss).sum::<f64>() / 100.0;
    let w = ConsistencyWrapper::new(TrainableDenoiser { model: state.target, schedule: Arc::clone(&s) }, &s);
    let (mean, cov) = cm_sample_moments(&w, &s, 3, 20_000);
    let rel = (&cov - prior.covariance()).norm() / prior.covariance().norm();
    println!("loss {first:.4} -> {last:.4}; mean {:.4}; covariance error {rel:.4}", mean.amax());
    assert!(mean.amax() < 0.05);
    assert!(rel < 0.1);
}
