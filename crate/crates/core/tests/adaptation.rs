mod common;

use ddip_core::adaptation::{dip_baseline, DipConfig};
use ddip_core::adaptation::{
    adapt_step, adaptation_loss, d3ip_meta_reconstruct, d3ip_reconstruct, ddip_reconstruct, horizon_gate,
    initial_adapters, mc_sample, reconstruct_without_adaptation, reptile_update, slerp, AdaptConfig, Counters,
    InitStrategy, MetaConfig, SamplingMode,
};
use ddip_core::approximators::{estimate, ApproximatorConfig, SolverContext};
use ddip_core::autodiff::{Graph, Tensor};
use ddip_core::denoiser::{Adapters, DenoiserConfig, DenoiserParams, Trainable};
use ddip_core::operators::{simulate_volume, Operator, OperatorSpec};
use ddip_core::optim::AdamW;
use ddip_core::schedule::NoiseSchedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    net: DenoiserParams,
    schedule: NoiseSchedule,
    op: Operator,
    approx: ApproximatorConfig,
    ys: Vec<Vec<f64>>,
}

impl Fixture {
    fn new(slices: usize, nfe: usize, eta: f64) -> Self {
        let op = common::ct(12, 0.01).build().unwrap();
        let ys = simulate_volume(&op, &common::volume(slices, 3), 4).unwrap();
        Fixture {
            net: common::tiny_net(2),
            schedule: common::short_schedule(nfe, eta),
            op,
            approx: ApproximatorConfig::default(),
            ys,
        }
    }

    fn ctx(&self) -> SolverContext<'_> {
        SolverContext {
            net: &self.net,
            schedule: &self.schedule,
            op: &self.op,
            config: &self.approx,
        }
    }

    fn keys(&self) -> Vec<u64> {
        (0..self.ys.len() as u64).collect()
    }
}

fn cfg(k: usize, inner_steps: usize) -> AdaptConfig {
    AdaptConfig {
        k,
        inner_steps,
        lr: 5e-3,
        zeta: 0,
        seed: 11,
        ..AdaptConfig::default()
    }
}

fn tensors_close(a: &Adapters, b: &Adapters) -> f64 {
    a.tensors()
        .iter()
        .zip(b.tensors())
        .map(|(x, y)| common::max_abs_diff(x.data(), y.data()))
        .fold(0.0, f64::max)
}

/// Adapters with every tensor filled from a seeded uniform draw.
fn random_adapters(template: &Adapters, seed: u64, scale: f64) -> Adapters {
    let mut a = template.clone();
    for (i, t) in a.tensors_mut().into_iter().enumerate() {
        let n = t.numel();
        for (v, u) in t.data_mut().iter_mut().zip(common::uniform(seed + i as u64, n)) {
            *v = scale * u;
        }
    }
    a
}

#[test]
fn adaptation_happens_only_inside_the_horizon() {
    let f = Fixture::new(2, 10, 0.85);
    let zeta = 300;
    let out = d3ip_reconstruct(&f.ctx(), &f.ys, &f.keys(), &AdaptConfig { zeta, ..cfg(1, 2) }).unwrap();
    let gated: Vec<usize> = f
        .schedule
        .transitions()
        .iter()
        .map(|&(t, _)| t)
        .filter(|&t| horizon_gate(t, zeta, 1000))
        .collect();
    assert!(!gated.is_empty() && gated.len() < f.schedule.steps().len());
    assert!(out.trace.iter().all(|r| r.t >= zeta && r.t + zeta <= 1000));
    assert_eq!(out.trace.len(), 2 * gated.len());
    assert_eq!(out.counters.adapt_steps, 2 * gated.len());
}

proptest! {
    #[test]
    fn horizon_gate_matches_its_definition(t in 0usize..=1000, zeta in 0usize..=500) {
        prop_assert_eq!(horizon_gate(t, zeta, 1000), zeta <= t && t <= 1000 - zeta);
    }

    #[test]
    fn reptile_is_an_affine_step(seed in any::<u64>(), a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let f = Fixture::new(1, 2, 0.0);
        let template = initial_adapters(&f.ctx(), &cfg(1, 1)).unwrap();
        let theta = random_adapters(&template, seed, 1.0);
        let target = random_adapters(&template, seed ^ 0xABCD, 1.0);
        let one = reptile_update(&theta, &target, a).unwrap();
        for ((o, t), g) in one.tensors().iter().zip(theta.tensors()).zip(target.tensors()) {
            for ((ov, tv), gv) in o.data().iter().zip(t.data()).zip(g.data()) {
                prop_assert!((ov - (tv + a * (gv - tv))).abs() < 1e-12);
            }
        }
        // two pulls towards the same target compose into one
        let two = reptile_update(&one, &target, b).unwrap();
        let direct = reptile_update(&theta, &target, 1.0 - (1.0 - a) * (1.0 - b)).unwrap();
        prop_assert!(tensors_close(&two, &direct) < 1e-12);
        prop_assert_eq!(reptile_update(&theta, &target, 1.0).unwrap(), target);
    }

    /// Unit vectors stay on the unit sphere along the interpolation.
    #[test]
    fn slerp_preserves_unit_norm(seed in any::<u64>(), frac in 0.0f64..=1.0) {
        let unit = |v: Vec<f64>| {
            let n = common::dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a = unit(common::uniform(seed, 32));
        let b = unit(common::uniform(seed ^ 1, 32));
        let s = slerp(&a, &b, frac).unwrap();
        prop_assert!((common::dot(&s, &s).sqrt() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn random_sampling_is_uniform_over_slices() {
    let (n, k, draws) = (10, 3, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        let idx = mc_sample(n, k, SamplingMode::Random, &mut rng).unwrap();
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for i in idx {
            counts[i] += 1;
        }
    }
    let p = k as f64 / n as f64;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "count {c}");
    }
    for mode in [SamplingMode::Random, SamplingMode::Neighbor] {
        assert_eq!(mc_sample(n, n, mode, &mut rng).unwrap(), (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn single_slice_per_slice_and_shared_runs_coincide() {
    let f = Fixture::new(1, 6, 0.85);
    let c = cfg(1, 3);
    let a = ddip_reconstruct(&f.ctx(), &f.ys, &[7], &c).unwrap();
    let b = d3ip_reconstruct(&f.ctx(), &f.ys, &[7], &c).unwrap();
    assert_eq!(a.volume, b.volume);
    assert_eq!(a.adapters, b.adapters);
    assert_eq!(a.counters, b.counters);
    let losses = |r: &ddip_core::adaptation::Reconstruction| r.trace.iter().map(|x| x.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn optimizer_reset_applies_to_both_schemes() {
    let f = Fixture::new(1, 6, 0.85);
    let fresh = cfg(1, 3);
    assert!(fresh.reset_optimizer);
    let a = ddip_reconstruct(&f.ctx(), &f.ys, &[7], &fresh).unwrap();
    let b = d3ip_reconstruct(&f.ctx(), &f.ys, &[7], &fresh).unwrap();
    assert_eq!(a.volume, b.volume);
    assert_eq!(a.adapters, b.adapters);
    let persistent = AdaptConfig {
        reset_optimizer: false,
        ..cfg(1, 3)
    };
    let kept = d3ip_reconstruct(&f.ctx(), &f.ys, &[7], &persistent).unwrap();
    assert!(tensors_close(&kept.adapters[0], &b.adapters[0]) > 0.0);
}

#[test]
fn per_slice_output_follows_slice_keys() {
    let f = Fixture::new(3, 5, 0.85);
    let c = AdaptConfig {
        init: InitStrategy::Noise,
        ..cfg(1, 2)
    };
    let keys = [40, 41, 42];
    let out = ddip_reconstruct(&f.ctx(), &f.ys, &keys, &c).unwrap();
    let order = [2, 0, 1];
    let ys: Vec<Vec<f64>> = order.iter().map(|&i| f.ys[i].clone()).collect();
    let pkeys: Vec<u64> = order.iter().map(|&i| keys[i]).collect();
    let permuted = ddip_reconstruct(&f.ctx(), &ys, &pkeys, &c).unwrap();
    for (j, &i) in order.iter().enumerate() {
        assert_eq!(permuted.volume[j], out.volume[i]);
        assert_eq!(permuted.adapters[j], out.adapters[i]);
    }
    // separate fits end in separate adapters
    assert!(tensors_close(&out.adapters[0], &out.adapters[1]) > 0.0);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let f = Fixture::new(3, 5, 0.85);
    let c = AdaptConfig { lr: 0.0, ..cfg(2, 2) };
    let out = d3ip_reconstruct(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
    assert_eq!(out.adapters[0], initial_adapters(&f.ctx(), &c).unwrap());
    let frozen = reconstruct_without_adaptation(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
    assert_eq!(out.volume, frozen.volume);
}

#[test]
fn unit_step_meta_without_finetuning_is_plain_shared_adaptation() {
    let f = Fixture::new(3, 5, 0.85);
    let c = AdaptConfig {
        meta: MetaConfig {
            alpha_start: 1.0,
            alpha_end: 1.0,
            finetune_steps: Some(0),
            finetune_lr: None,
        },
        ..cfg(2, 2)
    };
    let base = d3ip_reconstruct(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
    let meta = d3ip_meta_reconstruct(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
    assert_eq!(meta.volume, base.volume);
    assert_eq!(meta.meta_adapters.as_ref(), Some(&base.adapters[0]));
}

#[test]
fn meta_costs_and_storage() {
    for n in [2usize, 5] {
        let f = Fixture::new(n, 4, 0.85);
        let c = cfg(2, 2);
        let base = d3ip_reconstruct(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
        let meta = d3ip_meta_reconstruct(&f.ctx(), &f.ys, &f.keys(), &c).unwrap();
        assert!(2 * meta.counters.adapt_steps >= n * base.counters.adapt_steps);
        assert_eq!(meta.adapters.len(), n);
        assert_eq!(base.adapters.len(), 1);
        assert_eq!(base.adapters[0].to_bytes().len(), initial_adapters(&f.ctx(), &c).unwrap().to_bytes().len());
    }
}

/// With the whole volume in the batch, the batch loss and its adapter
/// gradient are the slice averages.
#[test]
fn full_batch_gradient_is_the_volume_average() {
    let f = Fixture::new(4, 5, 0.0);
    let ctx = f.ctx();
    let adapters = random_adapters(&initial_adapters(&ctx, &cfg(4, 1)).unwrap(), 9, 0.05);
    let s = common::SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<Vec<f64>> = (0..4).map(|_| common::gaussian(&mut rng, s * s)).collect();
    let t = 600;
    let grad_of = |idx: &[usize]| {
        let g = Graph::new();
        let x = Tensor::new(vec![idx.len(), 1, s, s], idx.iter().flat_map(|&i| xs[i].clone()).collect()).unwrap();
        let m = f.op.measurement_len();
        let y = Tensor::new(vec![idx.len(), m], idx.iter().flat_map(|&i| f.ys[i].clone()).collect()).unwrap();
        let est = estimate(&g, &ctx, Some(&adapters), Trainable::Adapters, &x, &y, t, None).unwrap();
        let loss = g
            .constant(y)
            .sub(est.mean.linear_map(f.op.map()).unwrap())
            .unwrap()
            .sq_norm()
            .unwrap()
            .scale(1.0 / idx.len() as f64)
            .unwrap();
        (loss.item(), est.bound.adapter_grads(&g.backward(loss).unwrap()))
    };
    let (full_loss, full) = grad_of(&[0, 1, 2, 3]);
    let mut avg_loss = 0.0;
    let mut avg: Vec<Vec<f64>> = full.iter().map(|t| vec![0.0; t.numel()]).collect();
    for i in 0..4 {
        let (l, g) = grad_of(&[i]);
        avg_loss += l / 4.0;
        for (a, gi) in avg.iter_mut().zip(&g) {
            for (v, w) in a.iter_mut().zip(gi.data()) {
                *v += w / 4.0;
            }
        }
        let direct = adaptation_loss(&ctx, Some(&adapters), &xs[i], &f.ys[i], t, None).unwrap();
        assert!((direct - l).abs() <= 1e-10 * l.abs().max(1.0));
    }
    assert!((full_loss - avg_loss).abs() <= 1e-10 * full_loss);
    let scale = full.iter().map(|t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    assert!(scale > 0.0);
    for (a, g) in avg.iter().zip(&full) {
        assert!(common::max_abs_diff(a, g.data()) <= 1e-10 * scale);
    }
}

#[test]
fn adapt_step_reports_losses_and_counts() {
    let f = Fixture::new(2, 5, 0.0);
    let ctx = f.ctx();
    let mut adapters = initial_adapters(&ctx, &cfg(2, 1)).unwrap();
    let mut opt = AdamW::new(1e-2);
    let s = common::SIZE;
    let x = Tensor::new(vec![2, 1, s, s], common::uniform(8, 2 * s * s)).unwrap();
    let y = Tensor::new(vec![2, f.op.measurement_len()], f.ys.concat()).unwrap();
    let mut counters = Counters::default();
    let losses = adapt_step(&ctx, &mut adapters, &mut opt, &x, &y, 500, 15, None, &mut counters).unwrap();
    assert_eq!(losses.len(), 15);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    assert_eq!(counters.adapt_steps, 15);
    assert_eq!(counters.denoiser_evals, 30);
    assert_eq!(counters.adapt_cg_iterations, 15 * 2 * 5);
    assert_eq!(opt.steps_taken(), 15);
}

/// Reference Adam with decoupled weight decay, written out per scalar.
#[test]
fn adamw_matches_a_reference_update() {
    let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 0.01);
    let mut opt = AdamW::new(lr);
    opt.weight_decay = wd;
    let mut p = Tensor::from_vec(vec![1.5, -0.7, 0.2]);
    let mut reference = p.data().to_vec();
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    for step in 1..=25 {
        // gradient of Σ (w − c)² with c = (0.3, 0.3, 0.3)
        let grad: Vec<f64> = p.data().iter().map(|w| 2.0 * (w - 0.3)).collect();
        opt.step(&mut [&mut p], &[Tensor::from_vec(grad)]).unwrap();
        for i in 0..3 {
            let g = 2.0 * (reference[i] - 0.3);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - f64::powi(b1, step));
            let vh = v[i] / (1.0 - f64::powi(b2, step));
            reference[i] -= lr * (mh / (vh.sqrt() + eps) + wd * reference[i]);
        }
        assert!(common::max_abs_diff(p.data(), &reference) < 1e-14);
    }
    assert!(p.data().iter().all(|w| (w - 0.3).abs() < 0.3));
}

fn dip_config(steps: usize, holdout: f64) -> DipConfig {
    DipConfig {
        net: DenoiserConfig {
            image_size: common::SIZE,
            base_channels: 4,
            time_embed_dim: 16,
            ..DenoiserConfig::default()
        },
        steps,
        lr: 5e-3,
        holdout_fraction: holdout,
        eval_every: 10,
        input_t: 500,
        seed: 3,
    }
}

#[test]
fn dip_overfits_identity_measurements() {
    let op = OperatorSpec::identity(common::SIZE, 0.0).build().unwrap();
    let truth = &common::volume(1, 6)[0];
    let out = dip_baseline(truth, &op, &dip_config(600, 0.0)).unwrap();
    assert_eq!(out.best_step, 600);
    assert!(out.holdout.is_empty());
    assert!(*out.losses.last().unwrap() < 0.05 * out.losses[0]);
    let psnr = ddip_core::metrics::psnr(&out.x, truth, 1.0).unwrap();
    assert!(psnr > 25.0, "psnr {psnr}");
}

#[test]
fn dip_fits_sparse_view_data_and_is_deterministic() {
    let op = common::ct(12, 0.0).build().unwrap();
    let y = op.apply(&common::volume(1, 7)[0]).unwrap();
    let cfg = dip_config(2000, 0.1);
    let a = dip_baseline(&y, &op, &cfg).unwrap();
    let first_below = a.losses.iter().position(|&l| l < 0.1 * a.losses[0]);
    assert!(first_below.is_some_and(|s| s < 2000));
    assert_eq!(a.holdout.len(), 201);
    assert!(a.holdout.iter().any(|&(s, _)| s == a.best_step));
    let b = dip_baseline(&y, &op, &DipConfig { steps: 300, ..cfg.clone() }).unwrap();
    let c = dip_baseline(&y, &op, &DipConfig { steps: 300, ..cfg }).unwrap();
    assert_eq!(b.x, c.x);
    assert_eq!(b.losses, a.losses[..300]);
}
