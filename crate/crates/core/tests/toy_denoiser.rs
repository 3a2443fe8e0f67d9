use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use streamdiff_core::denoiser::{DenoiseRequest, Denoiser};
use streamdiff_core::diffusion::{GaussianOracle, GaussianPrior, NoiseSchedule, OracleMode};
use streamdiff_core::engine::{run_stream, EngineOptions};
use streamdiff_core::temporal::ScheduleConfig;
use streamdiff_core::toynet::*;

fn small_dims() -> ToyNetDims {
    ToyNetDims { latent: 3, cond: 2, hidden: 6, ff: 8, temb: 4, t_max: 1000 }
}

fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_params(dims: ToyNetDims, rng: &mut ChaCha8Rng) -> ToyNetParams {
    let mut p = ToyNetParams::zeros(dims);
    for m in p.tensors_mut() {
        let (r, c) = m.shape();
        *m = randm(rng, r, c, 0.6);
    }
    p
}

fn random_sample(dims: ToyNetDims, n: usize, with_ref: bool, rng: &mut ChaCha8Rng) -> Sample {
    Sample {
        latents: randm(rng, dims.latent, n, 1.0),
        timesteps: (0..n).map(|_| rng.random_range(1..=1000)).collect(),
        cond: randm(rng, dims.cond, n, 1.0),
        reference: with_ref.then(|| DVector::from_fn(dims.latent, |_, _| rng.sample(StandardNormal))),
        target: randm(rng, dims.latent, n, 1.0),
    }
}

/// Largest elementwise relative error between analytic and central-difference gradients.
fn gradient_check(p: &ToyNetParams, batch: &[Sample], mask: AttentionMask) -> f64 {
    let (_, grad) = loss_and_grad(p, batch, mask).unwrap();
    let analytic = grad.to_flat();
    let base = p.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let lp = loss_and_grad(&ToyNetParams::from_flat(p.dims, &plus).unwrap(), batch, mask).unwrap().0;
        let lm = loss_and_grad(&ToyNetParams::from_flat(p.dims, &minus).unwrap(), batch, mask).unwrap().0;
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        let err = if scale < 1e-7 { (analytic[i] - numeric).abs() } else { (analytic[i] - numeric).abs() / scale };
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..4 {
        let mask = if case % 2 == 0 { AttentionMask::Full } else { AttentionMask::Causal };
        let with_ref = case >= 2;
        let p = random_params(small_dims(), &mut rng);
        let batch: Vec<Sample> = (0..2).map(|_| random_sample(small_dims(), 4, with_ref, &mut rng)).collect();
        let err = gradient_check(&p, &batch, mask);
        assert!(err < 1e-4, "case {case} ({mask:?}, reference {with_ref}): relative error {err:e}");
    }
}

#[test]
fn zero_everything_gives_zero_gradient() {
    let dims = small_dims();
    let p = ToyNetParams::zeros(dims);
    let s = Sample {
        latents: DMatrix::zeros(3, 4),
        timesteps: vec![10, 20, 30, 40],
        cond: DMatrix::zeros(2, 4),
        reference: None,
        target: DMatrix::zeros(3, 4),
    };
    let (loss, g) = loss_and_grad(&p, &[s], AttentionMask::Full).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.to_flat().iter().all(|&x| x == 0.0));
}

#[test]
fn dead_conditioning_path_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(small_dims(), &mut rng);
    let mut s = random_sample(small_dims(), 4, true, &mut rng);
    s.cond = DMatrix::zeros(2, 4);
    let (_, g) = loss_and_grad(&p, &[s], AttentionMask::Causal).unwrap();
    assert!(g.w_cond.iter().all(|&x| x == 0.0));
    assert!(g.w_q.iter().any(|&x| x != 0.0));
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_params(small_dims(), &mut rng);
    let x = randm(&mut rng, 6, 5, 1.0);
    let z = DVector::from_fn(6, |_, _| rng.sample(StandardNormal));
    for mask in [AttentionMask::Full, AttentionMask::Causal] {
        for zr in [None, Some(&z)] {
            let a = attention_weights(&p, &x, zr, mask);
            for row in a.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_frame_without_reference_is_value_path_plus_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_params(small_dims(), &mut rng);
    let x = randm(&mut rng, 6, 1, 1.0);
    let out = temporal_attention(&p, &x, None, AttentionMask::Full);
    let expect = &x + &p.w_o * &p.w_v * &x;
    assert!((out - expect).amax() < 1e-12);
}

#[test]
fn dominant_reference_logit_routes_every_row_to_the_reference_value() {
    let dims = small_dims();
    let mut p = ToyNetParams::zeros(dims);
    p.w_q = DMatrix::identity(6, 6) * 10.0;
    p.w_k = DMatrix::identity(6, 6) * 10.0;
    p.w_v = DMatrix::identity(6, 6);
    p.w_o = DMatrix::identity(6, 6);
    // Frames all share a positive first coordinate; the reference is huge along it.
    let mut x = DMatrix::from_element(6, 4, 0.01);
    x.row_mut(0).fill(1.0);
    let mut z = DVector::zeros(6);
    z[0] = 50.0;
    z[3] = -2.0;
    let a = attention_weights(&p, &x, Some(&z), AttentionMask::Causal);
    assert!(a.column(4).iter().all(|&w| (w - 1.0).abs() < 1e-12));
    let out = temporal_attention(&p, &x, Some(&z), AttentionMask::Causal);
    let before_residual = out - &x;
    for col in before_residual.column_iter() {
        assert!((col - &z).amax() < 1e-9);
    }
}

#[test]
fn causal_mask_changes_all_rows_but_the_last() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_params(small_dims(), &mut rng);
    let x = randm(&mut rng, 6, 5, 1.0);
    let full = temporal_attention(&p, &x, None, AttentionMask::Full);
    let causal = temporal_attention(&p, &x, None, AttentionMask::Causal);
    for i in 0..4 {
        assert!((full.column(i) - causal.column(i)).amax() > 1e-6, "column {i} unchanged");
    }
    assert_eq!(full.column(4), causal.column(4));
}

#[test]
fn causal_output_ignores_future_frames_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dims = small_dims();
    let p = random_params(dims, &mut rng);
    let s = random_sample(dims, 6, true, &mut rng);
    let base = forward(&p, &s.latents, &s.timesteps, &s.cond, s.reference.as_ref(), AttentionMask::Causal).unwrap();
    for i in 0..5 {
        let mut x = s.latents.clone();
        let mut t = s.timesteps.clone();
        let mut c = s.cond.clone();
        for j in i + 1..6 {
            x.column_mut(j).copy_from(&randm(&mut rng, 3, 1, 5.0));
            c.column_mut(j).copy_from(&randm(&mut rng, 2, 1, 5.0));
            t[j] = rng.random_range(1..=1000);
        }
        let out = forward(&p, &x, &t, &c, s.reference.as_ref(), AttentionMask::Causal).unwrap();
        for f in 0..=i {
            assert_eq!(out.column(f), base.column(f), "frame {f} moved when frames > {i} changed");
        }
    }
}

#[test]
fn reference_is_never_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = small_dims();
    let p = random_params(dims, &mut rng);
    let s = random_sample(dims, 1, true, &mut rng);
    let with = forward(&p, &s.latents, &s.timesteps, &s.cond, s.reference.as_ref(), AttentionMask::Causal).unwrap();
    let without = forward(&p, &s.latents, &s.timesteps, &s.cond, None, AttentionMask::Causal).unwrap();
    assert!((with - without).amax() > 1e-6);
}

#[test]
fn zero_head_predicts_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = small_dims();
    let mut p = random_params(dims, &mut rng);
    p.w_out.fill(0.0);
    p.b_out.fill(0.0);
    let s = random_sample(dims, 4, true, &mut rng);
    let v = forward(&p, &s.latents, &s.timesteps, &s.cond, s.reference.as_ref(), AttentionMask::Full).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn frame_positions_break_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dims = small_dims();
    let p = random_params(dims, &mut rng);
    let s = random_sample(dims, 4, false, &mut rng);
    let perm = [2, 0, 3, 1];
    let permute = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), 4, |r, c| m[(r, perm[c])]);
    let t: Vec<usize> = perm.iter().map(|&i| s.timesteps[i]).collect();
    let out = forward(&p, &s.latents, &s.timesteps, &s.cond, None, AttentionMask::Full).unwrap();
    let out_perm = forward(&p, &permute(&s.latents), &t, &permute(&s.cond), None, AttentionMask::Full).unwrap();
    assert!((permute(&out) - out_perm).amax() > 1e-6);
}

#[test]
fn forward_is_locally_lipschitz_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = small_dims();
    let p = random_params(dims, &mut rng);
    let s = random_sample(dims, 4, true, &mut rng);
    let f = |x: &DMatrix<f64>| forward(&p, x, &s.timesteps, &s.cond, s.reference.as_ref(), AttentionMask::Full).unwrap();
    let y = f(&s.latents);
    assert_eq!(y, f(&s.latents));
    let mut lip: f64 = 0.0;
    for _ in 0..20 {
        let delta = randm(&mut rng, 3, 4, 1e-4);
        let dy = f(&(&s.latents + &delta)) - &y;
        lip = lip.max(dy.norm() / delta.norm());
    }
    assert!(lip.is_finite() && lip < 1e4, "local Lipschitz estimate {lip}");
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = ToyNet::new(random_params(small_dims(), &mut rng), AttentionMask::Causal);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    save_checkpoint(&a, &net, 12, 0, serde_json::json!({"note": "test"})).unwrap();
    let (loaded, manifest) = load_checkpoint(&a).unwrap();
    assert_eq!(manifest.seed, 12);
    assert_eq!(manifest.mask, AttentionMask::Causal);
    assert_eq!(loaded.dims(), net.dims());
    for (x, y) in loaded.params.to_flat().iter().zip(net.params.to_flat()) {
        assert_eq!(*x, f64::from(y as f32));
    }
    save_checkpoint(&b, &loaded, 12, 0, serde_json::json!({"note": "test"})).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(load_checkpoint(&b).unwrap().0, loaded);
}

#[test]
fn checkpoint_rejects_mismatched_manifest() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = ToyNet::new(random_params(small_dims(), &mut rng), AttentionMask::Full);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    save_checkpoint(&a, &net, 0, 0, serde_json::Value::Null).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    std::fs::write(&a, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&a).is_err());
}

fn ar1_setup() -> (Arc<NoiseSchedule>, ScheduleConfig, GaussianSequences) {
    let s = Arc::new(NoiseSchedule::stable_diffusion());
    let prior = GaussianPrior::ar1(16, 8, 0.95, 1.0, 0.0).unwrap();
    (s, ScheduleConfig::default(), GaussianSequences::new(prior).unwrap())
}

fn fresh_net(seed: u64, mask: AttentionMask) -> ToyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ToyNet::new(ToyNetParams::init(ToyNetDims::default(), &mut rng).unwrap(), mask)
}

fn desk_train(steps: usize, layout: NoiseLayout, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        optimizer: AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() },
        layout,
        seed,
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let (s, cfg, data) = ar1_setup();
    let mut net = fresh_net(1, AttentionMask::Full);
    let before = net.clone();
    let tc = TrainConfig { steps: 3, optimizer: AdamWConfig { lr: 0.0, ..Default::default() }, ..Default::default() };
    let curve = train_temporal_adaptive(&mut net, &data, &s, &cfg, &tc).unwrap();
    assert_eq!(curve.len(), 3);
    assert_eq!(net, before);
}

#[test]
fn diverging_training_aborts_with_report() {
    let (s, cfg, data) = ar1_setup();
    let mut net = fresh_net(1, AttentionMask::Full);
    net.params.w_out.fill(f64::NAN);
    let err = train_temporal_adaptive(&mut net, &data, &s, &cfg, &desk_train(5, NoiseLayout::TemporalAdaptive, 0));
    assert!(matches!(err, Err(streamdiff_core::Error::Divergence { step: 0, .. })));
}

#[test]
fn temporal_adaptive_training_approaches_the_bayes_floor() {
    let (s, cfg, data) = ar1_setup();
    let val = validation_set(&data, &cfg, NoiseLayout::TemporalAdaptive, &s, 200, 99).unwrap();
    let oracle = GaussianOracle::new(data.prior().clone(), Arc::clone(&s), OracleMode::PosteriorMean);
    let floor = denoiser_v_mse(&oracle, &val, &s).unwrap();
    let mut net = fresh_net(1, AttentionMask::Full);
    let curve = train_temporal_adaptive(&mut net, &data, &s, &cfg, &desk_train(2000, NoiseLayout::TemporalAdaptive, 3))
        .unwrap();
    assert_eq!(curve.len(), 2000);
    let v = denoiser_v_mse(&ToyNetDenoiser::new(net, Arc::clone(&s)), &val, &s).unwrap();
    println!("validation v-MSE {v:.4}, oracle floor {floor:.4}");
    assert!(v <= 1.25 * floor, "v-MSE {v} vs floor {floor}");
}

#[test]
fn temporal_adaptive_finetune_beats_uniform_only_on_mixed_noise() {
    let (s, cfg, data) = ar1_setup();
    let val = validation_set(&data, &cfg, NoiseLayout::TemporalAdaptive, &s, 200, 7).unwrap();
    let mut uniform = fresh_net(2, AttentionMask::Full);
    train_temporal_adaptive(&mut uniform, &data, &s, &cfg, &desk_train(1500, NoiseLayout::Uniform, 4)).unwrap();
    let mut two_stage = uniform.clone();
    train_temporal_adaptive(&mut uniform, &data, &s, &cfg, &desk_train(1500, NoiseLayout::Uniform, 5)).unwrap();
    train_temporal_adaptive(&mut two_stage, &data, &s, &cfg, &desk_train(1500, NoiseLayout::TemporalAdaptive, 5))
        .unwrap();
    let u = denoiser_v_mse(&ToyNetDenoiser::new(uniform, Arc::clone(&s)), &val, &s).unwrap();
    let t = denoiser_v_mse(&ToyNetDenoiser::new(two_stage, Arc::clone(&s)), &val, &s).unwrap();
    println!("mixed-noise v-MSE: uniform only {u:.4}, two-stage {t:.4}");
    assert!(t < u);
}

#[test]
fn reference_is_encoded_once_per_stream_unless_recompute_is_set() {
    let s = Arc::new(NoiseSchedule::stable_diffusion());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dims = ToyNetDims { cond: 0, ..ToyNetDims::default() };
    let net = ToyNet::new(ToyNetParams::init(dims, &mut rng).unwrap(), AttentionMask::Full);
    let reference = DVector::from_fn(8, |_, _| rng.sample(StandardNormal));
    let cfg = ScheduleConfig::default();
    let cached = ToyNetDenoiser::new(net.clone(), Arc::clone(&s));
    let a = run_stream(&cfg, Arc::clone(&s), &EngineOptions::default(), &cached, streamdiff_core::engine::no_conditioning(), 32, Some(reference.clone()))
        .unwrap();
    assert_eq!(cached.reference_encodes(), 1);
    let mut fresh = ToyNetDenoiser::new(net, Arc::clone(&s));
    fresh.recompute_reference = true;
    let b = run_stream(&cfg, s, &EngineOptions::default(), &fresh, streamdiff_core::engine::no_conditioning(), 32, Some(reference))
        .unwrap();
    assert_eq!(fresh.reference_encodes() as usize, b.records.len());
    assert_eq!(a.latents(), b.latents());
}

#[test]
fn denoiser_returns_clean_estimate_from_v() {
    let s = Arc::new(NoiseSchedule::stable_diffusion());
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let dims = small_dims();
    let net = ToyNet::new(random_params(dims, &mut rng), AttentionMask::Full);
    let smp = random_sample(dims, 3, false, &mut rng);
    let v = forward(&net.params, &smp.latents, &smp.timesteps, &smp.cond, None, AttentionMask::Full).unwrap();
    let d = ToyNetDenoiser::new(net, Arc::clone(&s));
    let x0 = d
        .denoise(&DenoiseRequest { latents: &smp.latents, timesteps: &smp.timesteps, cond: &smp.cond, reference: None })
        .unwrap();
    for f in 0..3 {
        let (a, sd) = s.coefficients(smp.timesteps[f]).unwrap();
        for k in 0..3 {
            assert!((x0[(k, f)] - (a * smp.latents[(k, f)] - sd * v[(k, f)])).abs() < 1e-12);
        }
    }
}
