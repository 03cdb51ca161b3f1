use super::*;
use crate::tensor::{grad_check, AdamW, AdamWConfig};

fn toy_policy_config() -> PolicyConfig {
    PolicyConfig {
        fmt: FmtConfig { d: 16, image_size: 16, patch: 8, heads: 2, ft_conv_channels: 8, ..Default::default() },
        head: HeadConfig { action_dim: 3, horizon: 4, layers: 1, heads: 2, step_embed_dim: 16, mlp_ratio: 2 },
        diffusion: ScheduleConfig { steps: 10, ..Default::default() },
    }
}

fn random_obs(c: &FmtConfig, rng: &mut ChaCha8Rng) -> Observation {
    Observation {
        images: (0..2 * c.t_img * c.image_len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        ft: (0..c.ft_raw_len * 6).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn single_step_schedule() {
    let s = DiffusionSchedule::new(1, 1e-3, 1e-3).unwrap();
    assert_eq!(s.alpha_bar(1), 1.0 - 1e-3);
}

#[test]
fn alpha_bar_is_decreasing_and_matches_product_oracle() {
    let s = DiffusionSchedule::new(100, 1e-4, 0.02).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    for k in 1..=100 {
        assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
        assert!(s.beta(k) >= s.beta(k.max(2) - 1));
    }
    let log_sum: f64 = (0..100).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0)).ln()).sum();
    assert!((s.alpha_bar(100) - log_sum.exp()).abs() < 1e-9);
}

#[test]
fn invalid_schedules_are_rejected() {
    assert!(DiffusionSchedule::new(10, 0.0, 0.02).is_err());
    assert!(DiffusionSchedule::new(10, 0.03, 0.02).is_err());
    assert!(DiffusionSchedule::new(10, 1e-4, 1.0).is_err());
    assert!(DiffusionSchedule::new(0, 1e-4, 0.02).is_err());
}

#[test]
fn forward_noise_limits_and_range() {
    let s = DiffusionSchedule::new(100, 1e-4, 0.02).unwrap();
    let a0 = [0.3, -0.7, 1.0];
    assert_eq!(s.forward_noise(&a0, 0, &[0.5, 0.1, -0.2]).unwrap(), a0.to_vec());
    let scaled = s.forward_noise(&a0, 40, &[0.0; 3]).unwrap();
    for (x, a) in scaled.iter().zip(a0) {
        assert!((x - s.alpha_bar(40).sqrt() * a).abs() < 1e-15);
    }
    assert!(matches!(s.forward_noise(&a0, 101, &[0.0; 3]), Err(ScheduleError::StepOutOfRange { .. })));
}

#[test]
fn forward_process_preserves_unit_variance() {
    let s = DiffusionSchedule::new(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    for k in [1, 10, 50, 100] {
        let a0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ak = s.forward_noise(&a0, k, &eps).unwrap();
        let m = ak.iter().sum::<f64>() / n as f64;
        let v = ak.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((v - 1.0).abs() < 0.02, "k={k} var={v}");
    }
}

fn toy_head(action_dim: usize, horizon: usize, d: usize, seed: u64) -> (NoiseHead, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = HeadConfig { action_dim, horizon, layers: 2, heads: 2, step_embed_dim: 16, mlp_ratio: 2 };
    (NoiseHead::new(cfg, d, &mut store, &mut rng).unwrap(), store)
}

#[test]
fn noise_prediction_is_causal_and_conditioned() {
    let (head, s) = toy_head(3, 6, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::from_fn(&[2, 6, 3], |_| rng.random_range(-1.0..1.0));
    let obs_a = Tensor::from_fn(&[2, 5, 16], |_| rng.random_range(-1.0..1.0));
    let obs_b = Tensor::from_fn(&[2, 5, 16], |_| rng.random_range(-1.0..1.0));
    let mut t = Tape::new();
    let oa = t.constant(obs_a);
    let ob = t.constant(obs_b);
    let ca = head.prepare(&mut t, &s, oa).unwrap();
    let cb = head.prepare(&mut t, &s, ob).unwrap();
    let av = t.constant(a.clone());
    let base = head.predict(&mut t, &s, av, &[3, 7], &ca).unwrap();
    assert_eq!(t.shape(base), &[2, 6, 3]);
    let base_v = t.value(base).clone();
    for j in 0..6 {
        let mut pert = a.clone();
        for b in 0..2 {
            pert.data_mut()[(b * 6 + j) * 3] += 0.5;
        }
        let pv = t.constant(pert);
        let out = head.predict(&mut t, &s, pv, &[3, 7], &ca).unwrap();
        let out = t.value(out);
        for b in 0..2 {
            for row in 0..6 {
                let r = (b * 6 + row) * 3..(b * 6 + row + 1) * 3;
                let diff = out.data()[r.clone()].iter().zip(&base_v.data()[r]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                if row < j {
                    assert!(diff < 1e-12, "row {row} changed after perturbing {j}");
                } else if row == j {
                    assert!(diff > 1e-6);
                }
            }
        }
    }
    let other = head.predict(&mut t, &s, av, &[3, 7], &cb).unwrap();
    assert!(t.value(other).max_abs_diff(&base_v) > 1e-4);
}

#[test]
fn loss_oracles() {
    let s = DiffusionSchedule::new(100, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a0: Vec<f64> = (0..40_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nb = noise_batch(&s, &a0, 10_000, &mut rng);
    let mut t = Tape::<f64>::new();
    let eps = t.constant(Tensor::from_f64(&[10_000, 4], &nb.eps).unwrap());
    let perfect = t.constant(Tensor::from_f64(&[10_000, 4], &nb.eps).unwrap());
    let zero = t.constant(Tensor::zeros(&[10_000, 4]));
    let l0 = t.mse_loss(perfect, eps).unwrap();
    let l1 = t.mse_loss(zero, eps).unwrap();
    assert_eq!(t.value(l0).item(), 0.0);
    assert!((t.value(l1).item() - 1.0).abs() < 0.03);
    assert!(nb.ks.iter().all(|k| (1..=100).contains(k)));
}

/// Trains a head on fixed zero observation tokens to reproduce 1-D targets.
fn fit_1d(targets: &dyn Fn(&mut ChaCha8Rng) -> f64, steps: usize) -> (NoiseHead, ParamStore<f32>, DiffusionSchedule) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = HeadConfig { action_dim: 1, horizon: 2, layers: 1, heads: 2, step_embed_dim: 16, mlp_ratio: 4 };
    let head = NoiseHead::new(cfg, 16, &mut store, &mut rng).unwrap();
    let sched = DiffusionSchedule::new(50, 1e-4, 0.05).unwrap();
    let mut opt = AdamW::new(AdamWConfig { lr: 2e-3, weight_decay: 0.0, ..Default::default() }, &store);
    let batch = 64;
    for _ in 0..steps {
        let a0: Vec<f64> = (0..batch).flat_map(|_| [targets(&mut rng); 2]).collect();
        let nb = noise_batch(&sched, &a0, batch, &mut rng);
        let mut t = Tape::new();
        let obs = t.constant(Tensor::zeros(&[batch, 2, 16]));
        let cache = head.prepare(&mut t, &store, obs).unwrap();
        let ak = t.constant(Tensor::from_f64(&[batch, 2, 1], &nb.a_k).unwrap());
        let eps = t.constant(Tensor::from_f64(&[batch, 2, 1], &nb.eps).unwrap());
        let pred = head.predict(&mut t, &store, ak, &nb.ks, &cache).unwrap();
        let loss = t.mse_loss(pred, eps).unwrap();
        let g = t.backward(loss).unwrap();
        opt.step(&mut store, &g);
    }
    (head, store, sched)
}

fn draw(head: &NoiseHead, store: &ParamStore<f32>, sched: &DiffusionSchedule, n: usize) -> Vec<f32> {
    let mut t = Tape::new();
    let obs = t.constant(Tensor::zeros(&[n, 2, 16]));
    let cache = head.prepare(&mut t, store, obs).unwrap();
    let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(ChaCha8Rng::seed_from_u64).collect();
    sample_with(head, sched, &mut t, store, &cache, &mut rngs).unwrap().into_iter().map(|c| c[0]).collect()
}

#[test]
fn point_mass_is_recovered() {
    let (head, store, sched) = fit_1d(&|_| 0.3, 600);
    let samples = draw(&head, &store, &sched, 200);
    for v in samples {
        assert!((v - 0.3).abs() < 0.05, "{v}");
    }
}

#[test]
fn two_modes_are_both_sampled() {
    let (head, store, sched) = fit_1d(&|r| if r.random_bool(0.5) { 0.5 } else { -0.5 }, 1500);
    let samples = draw(&head, &store, &sched, 1000);
    let pos = samples.iter().filter(|v| **v > 0.25).count() as f64 / 1000.0;
    let neg = samples.iter().filter(|v| **v < -0.25).count() as f64 / 1000.0;
    let mid = 1.0 - pos - neg;
    assert!((0.3..=0.7).contains(&(pos / (pos + neg))), "pos {pos} neg {neg}");
    assert!(mid < 0.1, "{mid} of samples between the modes");
}

#[test]
fn sampling_is_deterministic_and_single_step_returns_clean_estimate() {
    let cfg = toy_policy_config();
    let p = Policy::<f32>::new(cfg.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = random_obs(&cfg.fmt, &mut rng);
    let run = || p.sample(&[&obs, &obs], &mut [ChaCha8Rng::seed_from_u64(9), ChaCha8Rng::seed_from_u64(10)]).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_ne!(a[0], a[1]);
    assert!(a.iter().flatten().all(|v| v.abs() <= 1.0));

    let sched = DiffusionSchedule::new(1, 1e-8, 1e-8).unwrap();
    let mut t = Tape::new();
    let enc = p.net.encoder.encode(&mut t, &p.store, &[&obs]).unwrap();
    let cache = p.net.head.prepare(&mut t, &p.store, enc).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(11);
    let x1: Vec<f64> = (0..12).map(|_| noise_rng.sample(StandardNormal)).collect();
    let xv = t.constant(Tensor::from_f64(&[1, 4, 3], &x1).unwrap());
    let eps = p.net.head.predict(&mut t, &p.store, xv, &[1], &cache).unwrap();
    let eps = t.value(eps).to_f64_vec();
    let out = sample_with(&p.net.head, &sched, &mut t, &p.store, &cache, &mut [ChaCha8Rng::seed_from_u64(11)]).unwrap();
    for j in 0..12 {
        let ab: f64 = 1.0 - 1e-8;
        let x0 = ((x1[j] - (1.0 - ab).sqrt() * eps[j]) / ab.sqrt()).clamp(-1.0, 1.0);
        assert!((out[0][j] as f64 - x0).abs() < 1e-5);
        assert!((out[0][j] as f64 - x1[j].clamp(-1.0, 1.0)).abs() < 1e-3);
    }
}

#[test]
fn full_pipeline_gradient_check_and_coverage() {
    let cfg = toy_policy_config();
    let p = Policy::<f64>::new(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs: Vec<Observation> = (0..2).map(|_| random_obs(&cfg.fmt, &mut rng)).collect();
    let acts: Vec<Vec<f32>> = (0..2).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let net = p.net.clone();
    let r = grad_check(
        &p.store,
        |t, s| {
            let o: Vec<&Observation> = obs.iter().collect();
            let a: Vec<&[f32]> = acts.iter().map(|v| v.as_slice()).collect();
            net.loss(t, s, &o, &a, &mut ChaCha8Rng::seed_from_u64(1))
        },
        1e-5,
        6,
        2,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.zero_grad_params.is_empty(), "{:?}", r.zero_grad_params);
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let cfg = toy_policy_config();
    let mut p = Policy::<f32>::new(cfg.clone(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let obs: Vec<Observation> = (0..8).map(|_| random_obs(&cfg.fmt, &mut rng)).collect();
    let acts: Vec<Vec<f32>> = (0..8).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let o: Vec<&Observation> = obs.iter().collect();
    let a: Vec<&[f32]> = acts.iter().map(|v| v.as_slice()).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..Default::default() }, &p.store);
    let eval = |p: &Policy<f32>| {
        let mut total = 0.0;
        for seed in 0..8 {
            let mut t = Tape::new();
            let l = p.net.loss(&mut t, &p.store, &o, &a, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
            total += t.value(l).item() as f64;
        }
        total / 8.0
    };
    let before = eval(&p);
    for step in 0..200 {
        let mut t = Tape::new();
        let l = p.net.loss(&mut t, &p.store, &o, &a, &mut ChaCha8Rng::seed_from_u64(step)).unwrap();
        let g = t.backward(l).unwrap();
        opt.step(&mut p.store, &g);
    }
    let after = eval(&p);
    assert!(after < 0.7 * before, "before {before} after {after}");
}

#[test]
fn save_and_load_reproduce_samples() {
    let cfg = toy_policy_config();
    let p = Policy::<f32>::new(cfg.clone(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    let q = Policy::<f32>::load(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let obs = random_obs(&cfg.fmt, &mut rng);
    let a = p.sample(&[&obs], &mut [ChaCha8Rng::seed_from_u64(1)]).unwrap();
    let b = q.sample(&[&obs], &mut [ChaCha8Rng::seed_from_u64(1)]).unwrap();
    assert_eq!(a, b);
}
