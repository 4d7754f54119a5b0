//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `DDIP_ACCEPTANCE_ONLY=1,7,12` runs a subset.
//! - `DDIP_ACCEPTANCE_CHECKPOINT=path` uses an existing prior instead of the
//!   cached or freshly trained one.
//! - `DDIP_ACCEPTANCE_STRICT=1` exits non-zero when any criterion fails.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddip_core::adaptation::{adaptation_loss, d3ip_reconstruct, reconstruct_without_adaptation, AdaptConfig, InitStrategy};
use ddip_core::approximators::{
    dds_correct, dds_mean, ddnm_correct, mbir_correct, tv_z, AdmmConfig, ApproximatorConfig, Method, SolverContext,
};
use ddip_core::autodiff::{audit, Graph, Tensor};
use ddip_core::denoiser::{
    build_denoiser, load_checkpoint, save_checkpoint, DenoiserConfig, DenoiserParams, RESIDUAL_CONVS,
};
use ddip_core::harness::{prepare_inputs, run_experiment_with, ExperimentConfig, MethodKind, Report};
use ddip_core::operators::{cg_solve, simulate_volume, OperatorKind, OperatorSpec};
use ddip_core::phantoms::{ellipse_image, EllipseSpec};
use ddip_core::schedule::{dsm_train, make_vp_schedule, DsmSettings, NoiseSchedule};

/// Method seeds for the three-seed criteria; the default configuration uses
/// the last one.
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Lazily trained prior and a cache of finished experiments keyed by their
/// serialized configuration.
struct Desk {
    prior: Option<(DenoiserParams, f64)>,
    runs: HashMap<String, (Report, f64)>,
}

impl Desk {
    fn prior(&mut self) -> &DenoiserParams {
        &self.prior.get_or_insert_with(load_or_train_prior).0
    }

    fn training_seconds(&mut self) -> f64 {
        self.prior();
        self.prior.as_ref().map_or(0.0, |p| p.1)
    }

    /// Runs (or recalls) an experiment and returns its report and seconds.
    fn run(&mut self, cfg: &ExperimentConfig) -> (&Report, f64) {
        let key = cfg.to_toml().expect("config serializes");
        if !self.runs.contains_key(&key) {
            let net = cfg.method.needs_prior().then(|| self.prior().clone());
            let start = Instant::now();
            let report = run_experiment_with(cfg, net.as_ref()).expect("experiment runs");
            let secs = start.elapsed().as_secs_f64();
            eprintln!("    [{} seed {}] {:.3} dB in {secs:.0} s", cfg.label(), cfg.seeds.method, report.mean_psnr);
            self.runs.insert(key.clone(), (report, secs));
        }
        let (r, s) = &self.runs[&key];
        (r, *s)
    }

    fn psnr(&mut self, cfg: &ExperimentConfig) -> f64 {
        self.run(cfg).0.mean_psnr
    }
}

/// The desk-scale task: 16 rectangle slices, 15-view CT, σ_y = 0.01.
fn desk(method: MethodKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        method,
        ..ExperimentConfig::default()
    };
    cfg.seeds.method = seed;
    cfg
}

fn prior_settings() -> (DenoiserConfig, DsmSettings) {
    let config = DenoiserConfig {
        image_size: 32,
        base_channels: 8,
        ..DenoiserConfig::default()
    };
    let settings = DsmSettings {
        steps: 2000,
        lr: 2e-3,
        batch: 16,
        seed: 0,
    };
    (config, settings)
}

fn load_or_train_prior() -> (DenoiserParams, f64) {
    if let Ok(path) = std::env::var("DDIP_ACCEPTANCE_CHECKPOINT") {
        eprintln!("    using prior {path}");
        return (load_checkpoint(path.as_ref()).expect("prior checkpoint loads"), 0.0);
    }
    let (config, settings) = prior_settings();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let path = dir.join(format!(
        "acceptance_prior_c{}_s{}_b{}.ckpt",
        config.base_channels, settings.steps, settings.batch
    ));
    let secs_path = path.with_extension("seconds");
    if let (Ok(net), Ok(secs)) = (load_checkpoint(&path), std::fs::read_to_string(&secs_path)) {
        eprintln!("    reusing cached prior {}", path.display());
        return (net, secs.trim().parse().unwrap_or(0.0));
    }
    eprintln!("    training the ellipse prior ({} steps)", settings.steps);
    let start = Instant::now();
    let mut net = build_denoiser(&config, settings.seed).expect("denoiser builds");
    let spec = EllipseSpec {
        image_size: config.image_size,
        ..EllipseSpec::default()
    };
    let mut sampler = |rng: &mut ChaCha8Rng| ellipse_image(&spec, rng);
    dsm_train(&mut net, &mut sampler, &NoiseSchedule::standard(), settings).expect("training runs");
    let secs = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&dir).ok();
    save_checkpoint(&path, &net).expect("prior saves");
    std::fs::write(&secs_path, format!("{secs}\n")).expect("timing saves");
    (net, secs)
}

fn adjoint_rel_err(spec: &OperatorSpec, seed: u64) -> f64 {
    let op = spec.build().expect("operator builds");
    let x = common::uniform(seed, op.image_len());
    let y = common::uniform(seed ^ 0xABCD, op.measurement_len());
    let lhs = common::dot(&op.apply(&x).unwrap(), &y);
    let rhs = common::dot(&x, &op.adjoint(&y).unwrap());
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

fn criterion_1(_: &mut Desk) -> Verdict {
    let start = Instant::now();
    let entries = audit(0, 1e-5).expect("audit runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let nets = entries.iter().filter(|e| e.name.starts_with("random_net")).count();
    verdict(
        worst < 1e-3 && nets == 3 && secs < 120.0,
        format!("{} entries ({nets} random nets), max rel err {worst:.2e}, {secs:.1} s", entries.len()),
    )
}

fn criterion_2(_: &mut Desk) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = |rng: &mut ChaCha8Rng, size: usize| {
        let mut m: Vec<bool> = (0..size * size).map(|_| rng.random_bool(0.3)).collect();
        m[0] = true;
        m
    };
    let mut worst = [0.0f64; 3];
    for trial in 0..100u64 {
        let ct = OperatorSpec::sparse_view_ct(rng.random_range(8..=64), rng.random_range(5..=60), 0.0);
        let size = rng.random_range(8..=32);
        let single = OperatorSpec {
            image_size: size,
            kind: OperatorKind::MriSingle { mask: mask(&mut rng, size) },
            sigma_y: 0.0,
        };
        let size = rng.random_range(8..=32);
        let multi = OperatorSpec {
            image_size: size,
            kind: OperatorKind::MriMulticoil {
                mask: mask(&mut rng, size),
                coils: 4,
            },
            sigma_y: 0.0,
        };
        for (w, spec) in worst.iter_mut().zip([ct, single, multi]) {
            *w = w.max(adjoint_rel_err(&spec, trial));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.iter().all(|&w| w < 1e-5) && secs < 60.0,
        format!(
            "max rel err CT {:.1e}, MRI {:.1e}, MRI 4-coil {:.1e}; {secs:.1} s",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_3(_: &mut Desk) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_res = 0.0f64;
    let mut over_budget = 0;
    for trial in 0..200u64 {
        let n = rng.random_range(1..=32);
        let cond = rng.random_range(1.0..999.0);
        let (a, _) = common::spd(n, cond, trial);
        let b = common::uniform(trial ^ 7, n);
        let map = |v: &[f64], out: &mut [f64]| {
            for i in 0..n {
                out[i] = (0..n).map(|j| a[i * n + j] * v[j]).sum();
            }
        };
        let out = cg_solve(map, &b, n, 0.0, None).expect("cg runs");
        if out.iterations > n {
            over_budget += 1;
        }
        let mut ax = vec![0.0; n];
        map(&out.x, &mut ax);
        let r = ax.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        worst_res = worst_res.max(r / common::dot(&b, &b).sqrt());
    }

    // DDS mean with M = n against a dense Cholesky solve of (I + γAᵀA) x = x̂₀ + γAᵀy.
    let config = DenoiserConfig {
        image_size: 4,
        base_channels: 4,
        time_embed_dim: 8,
        ..DenoiserConfig::default()
    };
    let net = build_denoiser(&config, 1).unwrap();
    let schedule = common::short_schedule(10, 0.0);
    let mut worst_direct = 0.0f64;
    for seed in 0..5u64 {
        let mut spec = common::orthonormal_rows(9, seed);
        if let OperatorKind::Dense { data, .. } = &mut spec.kind {
            for (i, v) in data.iter_mut().enumerate() {
                *v *= 1.0 + 0.3 * ((i % 7) as f64);
            }
        }
        let op = spec.build().unwrap();
        let n = 16;
        let approx = ApproximatorConfig {
            cg_iters: n,
            ..ApproximatorConfig::for_method(Method::Dds)
        };
        let ctx = SolverContext {
            net: &net,
            schedule: &schedule,
            op: &op,
            config: &approx,
        };
        let x_t = Tensor::new(vec![1, 1, 4, 4], common::uniform(seed + 10, n)).unwrap();
        let y = Tensor::new(vec![1, 9], common::uniform(seed + 20, 9)).unwrap();
        let got = dds_mean(&ctx, &x_t, &y, 500).unwrap();
        let x0 = net.tweedie_x0(&x_t, 500, &schedule).unwrap();
        let mut a = vec![0.0; n * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = op.adjoint(&op.apply(&e).unwrap()).unwrap();
            for i in 0..n {
                a[i * n + j] = approx.gamma * col[i] + if i == j { 1.0 } else { 0.0 };
            }
        }
        let aty = op.adjoint(y.data()).unwrap();
        let b: Vec<f64> = aty.iter().zip(x0.data()).map(|(p, q)| approx.gamma * p + q).collect();
        worst_direct = worst_direct.max(common::max_abs_diff(got.data(), &common::cholesky_solve(&a, &b)));
    }
    verdict(
        worst_res < 1e-8 && over_budget == 0 && worst_direct < 1e-8,
        format!("200 SPD systems: max rel residual {worst_res:.1e}; dds_mean vs direct {worst_direct:.1e}"),
    )
}

fn criterion_4(_: &mut Desk) -> Verdict {
    let tensor = |shape: &[usize], seed: u64| {
        Tensor::new(shape.to_vec(), common::uniform(seed, shape.iter().product())).unwrap()
    };
    let mut ddnm = 0.0f64;
    for rows in 1..=15 {
        let op = common::orthonormal_rows(rows, rows as u64).build().unwrap();
        let g = Graph::new();
        let y = g.constant(tensor(&[2, rows], 100 + rows as u64));
        let (x, _) = ddnm_correct(g.constant(tensor(&[2, 1, 4, 4], rows as u64)), y, &op, 30).unwrap();
        let ax = x.linear_map(op.map()).unwrap();
        ddnm = ddnm.max(common::max_abs_diff(ax.value().data(), y.value().data()));
    }
    let mut mbir = 0.0f64;
    for seed in 0..5u64 {
        let op = common::ct(6, 0.0).build().unwrap();
        let g = Graph::new();
        let x0 = g.constant(tensor(&[3, 1, common::SIZE, common::SIZE], seed));
        let y = g.constant(tensor(&[3, op.measurement_len()], seed ^ 3));
        let admm = AdmmConfig {
            lambda_tv: 0.0,
            ..AdmmConfig::ct()
        };
        let (m, _) = mbir_correct(x0, y, &op, 5.0, &admm).unwrap();
        let (d, _) = dds_correct(x0, y, &op, 5.0, admm.inner_cg_iters).unwrap();
        mbir = mbir.max(common::max_abs_diff(m.value().data(), d.value().data()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tv_exact = true;
    for _ in 0..50 {
        let (slices, len) = (rng.random_range(1..=6), rng.random_range(1..=40));
        let vol: Vec<Vec<f64>> = (0..slices)
            .map(|_| (0..len).map(|_| rng.random_range(-16i32..=16) as f64 / 8.0).collect())
            .collect();
        let mut brute = 0.0;
        for k in 1..slices {
            for p in 0..len {
                brute += (vol[k][p] - vol[k - 1][p]).abs();
            }
        }
        tv_exact &= tv_z(&vol) == brute;
    }
    verdict(
        ddnm < 1e-6 && mbir < 1e-8 && tv_exact,
        format!("ddnm range err {ddnm:.1e}; mbir(λ=0) vs dds {mbir:.1e}; tv_z exact: {tv_exact}"),
    )
}

fn criterion_5(_: &mut Desk) -> Verdict {
    let net = common::tiny_net(3);
    let schedule = common::short_schedule(6, 0.0);
    let op = common::ct(8, 0.01).build().unwrap();
    let approx = ApproximatorConfig::default();
    let ctx = SolverContext {
        net: &net,
        schedule: &schedule,
        op: &op,
        config: &approx,
    };
    let ys = simulate_volume(&op, &common::volume(2, 1), 2).unwrap();
    let cfg = AdaptConfig {
        init: InitStrategy::Noise,
        k: 2,
        inner_steps: 2,
        zeta: 0,
        ..AdaptConfig::default()
    };
    let keys = [0, 1];
    let frozen = [0, 1].map(|_| reconstruct_without_adaptation(&ctx, &ys, &keys, &cfg).unwrap().volume);
    let adapted = [0, 1].map(|_| d3ip_reconstruct(&ctx, &ys, &keys, &cfg).unwrap());
    let identical = frozen[0] == frozen[1]
        && adapted[0].volume == adapted[1].volume
        && adapted[0].adapters == adapted[1].adapters;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..500u64 {
        let eta = rng.random_range(0.0..=1.0);
        let s = make_vp_schedule(1000, 1e-4, 2e-2, 10, eta, 980).unwrap();
        let t = rng.random_range(2..=1000);
        let t_prev = rng.random_range(0..t);
        let x0 = common::uniform(trial, 64);
        let eps = common::uniform(trial ^ 5, 64);
        let x_t = s.perturb(&x0, t, &eps).unwrap();
        let noise = (eta > 0.0).then(|| eps.clone());
        let stepped = s.ddim_step(&x_t, &x0, &eps, t, t_prev, noise.as_deref()).unwrap();
        worst = worst.max(common::max_abs_diff(&stepped, &s.perturb(&x0, t_prev, &eps).unwrap()));
    }
    verdict(
        identical && worst < 1e-10,
        format!("η=0 chains bit-identical: {identical}; ddim_step vs perturb max err {worst:.1e}"),
    )
}

fn criterion_6(_: &mut Desk) -> Verdict {
    let net = common::tiny_net(4);
    let with = net.inject_lora(4, 1.0, RESIDUAL_CONVS, 9).unwrap();
    let x = Tensor::new(vec![3, 1, common::SIZE, common::SIZE], common::uniform(1, 3 * 256)).unwrap();
    let neutral = [1, 250, 999]
        .iter()
        .all(|&t| net.predict_eps(&x, t).unwrap() == with.predict_eps(&x, t).unwrap());

    let schedule = common::short_schedule(6, 0.85);
    let op = common::ct(8, 0.01).build().unwrap();
    let approx = ApproximatorConfig::default();
    let ctx = SolverContext {
        net: &net,
        schedule: &schedule,
        op: &op,
        config: &approx,
    };
    let before = net.base_hash();
    let ys = simulate_volume(&op, &common::volume(3, 2), 3).unwrap();
    let cfg = AdaptConfig {
        k: 2,
        inner_steps: 3,
        lr: 1e-2,
        zeta: 0,
        ..AdaptConfig::default()
    };
    let out = d3ip_reconstruct(&ctx, &ys, &[0, 1, 2], &cfg).unwrap();
    let moved = out.adapters[0].layers.values().any(|p| p.up.data().iter().any(|&v| v != 0.0));
    let frozen = net.base_hash() == before;
    verdict(
        neutral && moved && frozen,
        format!("zero-init forward bit-exact: {neutral}; adapters trained: {moved}; base hash unchanged: {frozen}"),
    )
}

fn criterion_7(d: &mut Desk) -> Verdict {
    let train = d.training_seconds();
    let (dds, t1) = {
        let (r, s) = d.run(&desk(MethodKind::Dds, SEEDS[2]));
        (r.mean_psnr, s)
    };
    let (base, t2) = {
        let (r, s) = d.run(&desk(MethodKind::D3ipBase, SEEDS[2]));
        (r.mean_psnr, s)
    };
    let (mbir, t3) = {
        let (r, s) = d.run(&desk(MethodKind::D3ipMbir, SEEDS[2]));
        (r.mean_psnr, s)
    };
    let minutes = (train + t1 + t2 + t3) / 60.0;
    let gain = base >= dds + 1.0;
    let order = mbir >= base - 0.2;
    verdict(
        gain && order && minutes < 30.0,
        format!(
            "dds {dds:.2}, d3ip_base {base:.2} ({:+.2} dB, need ≥ +1.00), d3ip_mbir {mbir:.2}; {minutes:.1} min incl. training",
            base - dds
        ),
    )
}

fn criterion_8(d: &mut Desk) -> Verdict {
    let mut wins = 0;
    let mut within = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let full = d.psnr(&desk(MethodKind::Ddip, seed));
        let mut scd = desk(MethodKind::Ddip, seed);
        scd.adapt.adapt_cg_iters = Some(1);
        let scd = d.psnr(&scd);
        wins += usize::from(full > scd);
        within &= full >= scd - 0.1;
        parts.push(format!("{full:.2} vs {scd:.2}"));
    }
    verdict(
        within && wins >= 2,
        format!("CG 5 vs CG 1 per seed: {} ({wins}/3 strictly better)", parts.join(", ")),
    )
}

fn criterion_9(d: &mut Desk) -> Verdict {
    let small = |method: MethodKind, slices: usize| {
        let mut cfg = desk(method, 0);
        cfg.phantom.slices = slices;
        cfg.adapt.k = cfg.adapt.k.min(slices);
        cfg.schedule.nfe = 10;
        cfg.adapt.inner_steps = 3;
        cfg
    };
    let steps = |d: &mut Desk, m| d.run(&small(m, 8)).0.counters.adapt_steps;
    let (per_slice, shared) = (steps(d, MethodKind::Ddip), steps(d, MethodKind::D3ipBase));
    let ratio = per_slice as f64 / shared as f64;
    let bytes = |d: &mut Desk, n| {
        let r = d.run(&small(MethodKind::D3ipBase, n)).0;
        let rec = r.reconstruction.as_ref().expect("adapted run");
        (rec.adapters.len(), rec.adapters.iter().map(|a| a.to_bytes().len()).sum::<usize>())
    };
    let (sets2, bytes2) = bytes(d, 2);
    let (sets16, bytes16) = bytes(d, 16);
    let ddip_sets = d.run(&small(MethodKind::Ddip, 8)).0.reconstruction.as_ref().unwrap().adapters.len();
    verdict(
        (6.4..=9.6).contains(&ratio) && sets2 == 1 && sets16 == 1 && bytes2 == bytes16 && ddip_sets == 8,
        format!(
            "steps ddip/d3ip = {per_slice}/{shared} = {ratio:.2} for N=8; d3ip adapter bytes N=2: {bytes2}, N=16: {bytes16}; ddip sets: {ddip_sets}"
        ),
    )
}

fn criterion_10(d: &mut Desk) -> Verdict {
    let mut ok = true;
    let mut best = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let full = d.psnr(&desk(MethodKind::D3ipBase, seed));
        let mut no_gate = desk(MethodKind::D3ipBase, seed);
        no_gate.adapt.zeta = 0;
        let no_gate = d.psnr(&no_gate);
        let mut no_init = desk(MethodKind::D3ipBase, seed);
        no_init.adapt.init = InitStrategy::Noise;
        let no_init = d.psnr(&no_init);
        ok &= full >= no_gate - 0.1 && full >= no_init - 0.1;
        best += usize::from(full > no_gate && full > no_init);
        parts.push(format!("{full:.2}/{no_gate:.2}/{no_init:.2}"));
    }
    verdict(
        ok && best >= 2,
        format!("full/ζ=0/noise-init per seed: {} (full strictly best in {best}/3)", parts.join(", ")),
    )
}

/// Final adaptation loss of every slice: the run's final adapters on the
/// state that entered its last adapted timestep.
fn final_losses(d: &mut Desk, cfg: &ExperimentConfig) -> Vec<f64> {
    let ys = prepare_inputs(cfg).expect("inputs").measurements;
    let adapt = cfg.effective_adapt();
    let schedule = cfg.schedule.build().unwrap();
    let op = cfg.operator_spec().build().unwrap();
    let net = d.prior().clone();
    let (report, _) = d.run(cfg);
    let rec = report.reconstruction.as_ref().expect("adapted run");
    let probe = rec.probe.as_ref().expect("adaptation happened");
    let ctx = SolverContext {
        net: &net,
        schedule: &schedule,
        op: &op,
        config: &adapt.approximator,
    };
    probe
        .states
        .iter()
        .zip(&ys)
        .enumerate()
        .map(|(i, (x, y))| {
            let adapters = &rec.adapters[i.min(rec.adapters.len() - 1)];
            adaptation_loss(&ctx, Some(adapters), x, y, probe.t, adapt.adapt_cg_iters).unwrap()
        })
        .collect()
}

fn criterion_11(d: &mut Desk) -> Verdict {
    let base_cfg = desk(MethodKind::D3ipBase, SEEDS[2]);
    let meta_cfg = desk(MethodKind::D3ipMeta, SEEDS[2]);
    let base = final_losses(d, &base_cfg);
    let meta = final_losses(d, &meta_cfg);
    let lower = meta.iter().zip(&base).filter(|(m, b)| **m <= **b * (1.0 + 1e-6)).count();
    let (pb, pm) = (d.psnr(&base_cfg), d.psnr(&meta_cfg));
    verdict(
        lower == base.len() && pm >= pb - 0.1,
        format!(
            "meta loss ≤ base on {lower}/{} slices (mean {:.3} vs {:.3}); PSNR meta {pm:.2} vs base {pb:.2}",
            base.len(),
            meta.iter().sum::<f64>() / meta.len() as f64,
            base.iter().sum::<f64>() / base.len() as f64
        ),
    )
}

fn criterion_12(d: &mut Desk) -> Verdict {
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let k6 = d.psnr(&desk(MethodKind::D3ipBase, seed));
        let mut one = desk(MethodKind::D3ipBase, seed);
        one.adapt.k = 1;
        let k1 = d.psnr(&one);
        wins += usize::from(k6 >= k1);
        parts.push(format!("{k6:.2} vs {k1:.2}"));
    }
    verdict(wins >= 2, format!("K=6 vs K=1 per seed: {} ({wins}/3)", parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn(&mut Desk) -> Verdict); 12] = [
        ("autodiff audit", criterion_1),
        ("operator adjointness", criterion_2),
        ("CG exactness", criterion_3),
        ("approximator identities", criterion_4),
        ("sampler determinism and consistency", criterion_5),
        ("adapter neutrality and freeze", criterion_6),
        ("desk-scale OOD trend", criterion_7),
        ("adaptation-CG correction trend", criterion_8),
        ("complexity counters and storage", criterion_9),
        ("horizon and initialization ablation", criterion_10),
        ("meta improvement", criterion_11),
        ("K ablation", criterion_12),
    ];
    let only: Option<Vec<usize>> = std::env::var("DDIP_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let strict = std::env::var("DDIP_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut d = Desk {
        prior: None,
        runs: HashMap::new(),
    };
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let v = catch_unwind(AssertUnwindSafe(|| check(&mut d))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {tag}  {name}: {}", v.detail);
        if !v.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
    }
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
