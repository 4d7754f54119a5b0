//! Reverse diffusion with on-the-fly adapter fine-tuning.
//!
//! `ddip_reconstruct` adapts a fresh adapter set per slice along the whole
//! reverse trajectory. `d3ip_reconstruct` shares one adapter set across the
//! volume, adapting on a Monte-Carlo batch of slices at each timestep and
//! then stepping every slice. `d3ip_meta_reconstruct` runs the shared
//! variant with Reptile updates and uses the result to initialize a
//! per-slice pass.

mod dip;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::approximators::{estimate, ApproximatorConfig, Method, SolverContext};
use crate::autodiff::{Graph, Tensor};
use crate::denoiser::{Adapters, Trainable, RESIDUAL_CONVS};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::schedule::standard_normal;

pub use dip::{dip_baseline, DipConfig, DipResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    Neighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Independent standard normal noise per slice.
    Noise,
    /// Pseudo-inverse of the measurement plus noise interpolated on the
    /// sphere between two endpoint draws.
    PseudoInverseSlerp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Per-slice fine-tuning steps; defaults to `inner_steps`.
    pub finetune_steps: Option<usize>,
    /// Per-slice fine-tuning learning rate; defaults to `lr`.
    pub finetune_lr: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha_start: 1.0,
            alpha_end: 0.5,
            finetune_steps: None,
            finetune_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Slices per Monte-Carlo batch.
    pub k: usize,
    /// Optimizer steps per adapted timestep.
    pub inner_steps: usize,
    pub lr: f64,
    /// Start every adapted timestep with fresh AdamW moments. When off, the
    /// moments persist for the whole trajectory (per slice in DDIP), and the
    /// large early-timestep gradients then suppress late-timestep updates.
    pub reset_optimizer: bool,
    /// Adaptation happens only for `zeta ≤ t ≤ T − zeta`.
    pub zeta: usize,
    pub sampling_mode: SamplingMode,
    pub init: InitStrategy,
    pub approximator: ApproximatorConfig,
    /// CG iterations inside the adaptation loss; `None` uses the sampling
    /// count. One iteration gives the steerable-conditional-diffusion loss.
    pub adapt_cg_iters: Option<usize>,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// CG iterations for the pseudo-inverse used at initialization.
    pub pinv_iters: usize,
    pub meta: MetaConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            k: 6,
            inner_steps: 10,
            lr: 1e-3,
            reset_optimizer: true,
            zeta: 40,
            sampling_mode: SamplingMode::Random,
            init: InitStrategy::PseudoInverseSlerp,
            approximator: ApproximatorConfig::default(),
            adapt_cg_iters: None,
            lora_rank: 4,
            lora_scale: 1.0,
            pinv_iters: 30,
            meta: MetaConfig::default(),
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.approximator.validate()?;
        if self.k == 0 || self.lora_rank == 0 {
            return Err(Error::config("k and lora_rank must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.adapt_cg_iters == Some(0) {
            return Err(Error::config("adapt_cg_iters must be at least 1"));
        }
        let m = &self.meta;
        if !(m.alpha_start > 0.0 && m.alpha_start <= 1.0 && m.alpha_end > 0.0 && m.alpha_end <= 1.0) {
            return Err(Error::config("meta step sizes must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// One recorded adaptation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptRecord {
    /// Slice index for per-slice runs; `None` for shared-adapter runs.
    pub slice: Option<usize>,
    pub t: usize,
    pub inner_step: usize,
    pub loss: f64,
}

/// Work counters accumulated over a reconstruction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    /// Optimizer updates applied to adapters.
    pub adapt_steps: usize,
    /// Denoiser forward passes, counted per slice.
    pub denoiser_evals: usize,
    pub adapt_cg_iterations: usize,
    pub sample_cg_iterations: usize,
}

impl Counters {
    fn absorb(&mut self, other: Counters) {
        self.adapt_steps += other.adapt_steps;
        self.denoiser_evals += other.denoiser_evals;
        self.adapt_cg_iterations += other.adapt_cg_iterations;
        self.sample_cg_iterations += other.sample_cg_iterations;
    }
}

/// States entering the last adapted timestep, one per slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub t: usize,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub volume: Vec<Vec<f64>>,
    /// One set per slice for per-slice runs, a single set otherwise.
    pub adapters: Vec<Adapters>,
    /// Shared adapters that seeded per-slice fine-tuning (meta runs).
    pub meta_adapters: Option<Adapters>,
    pub trace: Vec<AdaptRecord>,
    pub counters: Counters,
    pub probe: Option<Probe>,
}

// Stream identifiers; every random quantity has its own stream so that
// changing one consumer never shifts another.
const ADAPTER_STREAM: u64 = 1;
const ENDPOINT_STREAM: u64 = 2;
const MC_STREAM: u64 = 3;
const SLICE_INIT_STREAM: u64 = 4;
const SLICE_STEP_STREAM: u64 = 5;

pub(crate) fn stream(seed: u64, purpose: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) ^ key);
    rng
}

/// True when the timestep lies inside the adaptation horizon
/// `[zeta, T − zeta]`.
pub fn horizon_gate(t: usize, zeta: usize, timesteps: usize) -> bool {
    t >= zeta && t + zeta <= timesteps
}

/// Reptile step `θ + α(θ̃ − θ)`; `α = 1` returns `θ̃` exactly.
pub fn reptile_update(theta: &Adapters, adapted: &Adapters, alpha: f64) -> Result<Adapters> {
    let out = theta.reptile_update(adapted, alpha)?;
    Ok(if alpha == 1.0 { adapted.clone() } else { out })
}

/// Linear step size from `start` at the first timestep to `end` at the last.
pub fn meta_alpha(start: f64, end: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return start;
    }
    start + (end - start) * step as f64 / (steps - 1) as f64
}

/// Slice indices for one Monte-Carlo batch, sorted ascending.
pub fn mc_sample(n: usize, k: usize, mode: SamplingMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot sample {k} of {n} slices")));
    }
    Ok(match mode {
        SamplingMode::Random => {
            let mut idx = index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        SamplingMode::Neighbor => {
            let start = rng.random_range(0..=n - k);
            (start..start + k).collect()
        }
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spherical interpolation of direction with geometric interpolation of
/// length; exact at both endpoints. Nearly (anti)parallel endpoints fall
/// back to linear interpolation of the unit vectors.
pub fn slerp(a: &[f64], b: &[f64], frac: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "slerp",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if frac == 0.0 {
        return Ok(a.to_vec());
    }
    if frac == 1.0 {
        return Ok(b.to_vec());
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y).collect());
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let (wa, wb) = if theta.sin().abs() < 1e-6 {
        (1.0 - frac, frac)
    } else {
        (((1.0 - frac) * theta).sin() / theta.sin(), (frac * theta).sin() / theta.sin())
    };
    let mut dir: Vec<f64> = a.iter().zip(b).map(|(x, y)| wa * x / na + wb * y / nb).collect();
    let dn = norm(&dir);
    let length = na.powf(1.0 - frac) * nb.powf(frac);
    if dn > 0.0 {
        for v in dir.iter_mut() {
            *v *= length / dn;
        }
    }
    Ok(dir)
}

/// Starting states at the first DDIM timestep, one per slice.
pub fn initial_states(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig) -> Result<Vec<Vec<f64>>> {
    let n = ctx.op.image_len();
    let count = ys.len();
    match cfg.init {
        InitStrategy::Noise => Ok(keys
            .iter()
            .map(|&k| standard_normal(&mut stream(cfg.seed, SLICE_INIT_STREAM, k), n))
            .collect()),
        InitStrategy::PseudoInverseSlerp => {
            let mut rng = stream(cfg.seed, ENDPOINT_STREAM, 0);
            let first = standard_normal(&mut rng, n);
            let last = standard_normal(&mut rng, n);
            let ab = ctx.schedule.alpha_bar(ctx.schedule.t_start());
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            ys.iter()
                .enumerate()
                .map(|(i, y)| {
                    let frac = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
                    let noise = slerp(&first, &last, frac)?;
                    let pinv = ctx.op.pseudo_inverse(y, cfg.pinv_iters)?;
                    Ok(pinv.iter().zip(&noise).map(|(p, e)| a * p + s * e).collect())
                })
                .collect()
        }
    }
}

/// Fresh adapters for `cfg`; deterministic in the configured seed.
pub fn initial_adapters(ctx: &SolverContext, cfg: &AdaptConfig) -> Result<Adapters> {
    let seed = stream(cfg.seed, ADAPTER_STREAM, 0).random();
    let params = ctx.net.inject_lora(cfg.lora_rank, cfg.lora_scale, RESIDUAL_CONVS, seed)?;
    Ok(params.adapters.expect("adapters injected"))
}

fn stack(ctx: &SolverContext, xs: &[&[f64]]) -> Result<Tensor> {
    let s = ctx.net.config.image_size;
    Tensor::new(vec![xs.len(), 1, s, s], xs.iter().flat_map(|x| x.iter().copied()).collect())
}

fn stack_measurements(ys: &[&[f64]]) -> Result<Tensor> {
    let m = ys.first().map_or(0, |y| y.len());
    Tensor::new(vec![ys.len(), m], ys.iter().flat_map(|y| y.iter().copied()).collect())
}

/// `L` optimizer steps on the mean adaptation loss over a slice batch.
/// Returns the loss before each step.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step(
    ctx: &SolverContext,
    adapters: &mut Adapters,
    opt: &mut AdamW,
    x_t: &Tensor,
    ys: &Tensor,
    t: usize,
    steps: usize,
    cg_iters: Option<usize>,
    counters: &mut Counters,
) -> Result<Vec<f64>> {
    let batch = x_t.shape()[0];
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = Graph::new();
        let est = estimate(&g, ctx, Some(adapters), Trainable::Adapters, x_t, ys, t, cg_iters)?;
        let y = g.constant(ys.clone());
        let loss = y
            .sub(est.mean.linear_map(ctx.op.map())?)?
            .sq_norm()?
            .scale(1.0 / batch as f64)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("adaptation loss is {value} at t = {t}")));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let grads = est.bound.adapter_grads(&grads);
        opt.step(&mut adapters.tensors_mut(), &grads)?;
        counters.adapt_steps += 1;
        counters.denoiser_evals += batch;
        counters.adapt_cg_iterations += est.cg_iterations;
    }
    Ok(losses)
}

/// Adaptation loss of one slice at a recorded state, without updating.
pub fn adaptation_loss(
    ctx: &SolverContext,
    adapters: Option<&Adapters>,
    x_t: &[f64],
    y: &[f64],
    t: usize,
    cg_iters: Option<usize>,
) -> Result<f64> {
    let g = Graph::new();
    let est = estimate(&g, ctx, adapters, Trainable::Nothing, &stack(ctx, &[x_t])?, &stack_measurements(&[y])?, t, cg_iters)?;
    let ax = est.mean.linear_map(ctx.op.map())?;
    let r = ax.value();
    Ok(r.data().iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum())
}

/// Posterior mean and one DDIM step for every slice of `xs`.
fn sample_step(
    ctx: &SolverContext,
    adapters: Option<&Adapters>,
    xs: &[Vec<f64>],
    ys: &Tensor,
    t: usize,
    t_prev: usize,
    rngs: &mut [ChaCha8Rng],
    counters: &mut Counters,
) -> Result<Vec<Vec<f64>>> {
    let g = Graph::new();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let est = estimate(&g, ctx, adapters, Trainable::Nothing, &stack(ctx, &refs)?, ys, t, None)?;
    counters.denoiser_evals += xs.len();
    counters.sample_cg_iterations += est.cg_iterations;
    let (mean, eps) = (est.mean.value(), est.eps.value());
    let n = ctx.op.image_len();
    let stochastic = ctx.schedule.eta() > 0.0;
    xs.iter()
        .zip(rngs.iter_mut())
        .enumerate()
        .map(|(i, (x, rng))| {
            let noise = stochastic.then(|| standard_normal(rng, n));
            ctx.schedule.ddim_step(
                x,
                &mean.data()[i * n..(i + 1) * n],
                &eps.data()[i * n..(i + 1) * n],
                t,
                t_prev,
                noise.as_deref(),
            )
        })
        .collect()
}

fn check_inputs(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig) -> Result<()> {
    cfg.validate()?;
    if ys.is_empty() || keys.len() != ys.len() {
        return Err(Error::invalid("need one key per measurement and at least one slice"));
    }
    if ys.iter().any(|y| y.len() != ctx.op.measurement_len()) {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            lhs: vec![ys[0].len()],
            rhs: vec![ctx.op.measurement_len()],
        });
    }
    if ctx.op.image_len() != ctx.net.config.image_size.pow(2) {
        return Err(Error::invalid("operator and denoiser image sizes differ"));
    }
    if ctx.config != &cfg.approximator {
        return Err(Error::invalid("solver context and adaptation config disagree on the approximator"));
    }
    Ok(())
}

/// Per-slice reverse trajectory with adapters started from `start`.
#[allow(clippy::too_many_arguments)]
fn run_slice(
    ctx: &SolverContext,
    cfg: &AdaptConfig,
    start: &Adapters,
    x_init: Vec<f64>,
    y: &[f64],
    key: u64,
    slice: usize,
    steps: usize,
    lr: f64,
    out: &mut Reconstruction,
) -> Result<Vec<f64>> {
    let mut adapters = start.clone();
    let mut opt = AdamW::new(lr);
    let mut rng = [stream(cfg.seed, SLICE_STEP_STREAM, key)];
    let yt = stack_measurements(&[y])?;
    let mut x = vec![x_init];
    let mut probe = None;
    let timesteps = ctx.schedule.timesteps();
    for (t, t_prev) in ctx.schedule.transitions() {
        if steps > 0 && horizon_gate(t, cfg.zeta, timesteps) {
            probe = Some((t, x[0].clone()));
            if cfg.reset_optimizer {
                opt = AdamW::new(lr);
            }
            let losses = adapt_step(
                ctx,
                &mut adapters,
                &mut opt,
                &stack(ctx, &[&x[0]])?,
                &yt,
                t,
                steps,
                cfg.adapt_cg_iters,
                &mut out.counters,
            )?;
            out.trace.extend(losses.into_iter().enumerate().map(|(l, loss)| AdaptRecord {
                slice: Some(slice),
                t,
                inner_step: l,
                loss,
            }));
        }
        x = sample_step(ctx, Some(&adapters), &x, &yt, t, t_prev, &mut rng, &mut out.counters)?;
    }
    let Some(mut state) = x.pop() else {
        return Err(Error::invalid("empty trajectory"));
    };
    for v in state.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    if let Some((t, s)) = probe {
        let p = out.probe.get_or_insert(Probe { t, states: Vec::new() });
        p.states.push(s);
    }
    out.adapters.push(adapters);
    Ok(state)
}

fn per_slice(
    ctx: &SolverContext,
    ys: &[Vec<f64>],
    keys: &[u64],
    cfg: &AdaptConfig,
    start: &Adapters,
    steps: usize,
    lr: f64,
) -> Result<Reconstruction> {
    if cfg.approximator.method == Method::Mbir {
        return Err(Error::config("slice-axis TV needs a slice block; use the shared-adapter variant"));
    }
    let init = initial_states(ctx, ys, keys, cfg)?;
    let mut out = Reconstruction {
        volume: Vec::with_capacity(ys.len()),
        adapters: Vec::with_capacity(ys.len()),
        meta_adapters: None,
        trace: Vec::new(),
        counters: Counters::default(),
        probe: None,
    };
    for (i, (x0, y)) in init.into_iter().zip(ys).enumerate() {
        let x = run_slice(ctx, cfg, start, x0, y, keys[i], i, steps, lr, &mut out)?;
        out.volume.push(x);
    }
    Ok(out)
}

/// Per-slice adaptation with a fresh adapter set for every slice. Random
/// streams are keyed by `keys[i]`, so permuting slices together with their
/// keys permutes the output.
pub fn ddip_reconstruct(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig) -> Result<Reconstruction> {
    check_inputs(ctx, ys, keys, cfg)?;
    let start = initial_adapters(ctx, cfg)?;
    per_slice(ctx, ys, keys, cfg, &start, cfg.inner_steps, cfg.lr)
}

fn shared(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig, meta: bool) -> Result<Reconstruction> {
    check_inputs(ctx, ys, keys, cfg)?;
    let count = ys.len();
    if cfg.k > count {
        return Err(Error::config(format!("k = {} exceeds the {count} slices", cfg.k)));
    }
    if cfg.approximator.method == Method::Mbir {
        if cfg.k < 2 {
            return Err(Error::config("slice-axis TV needs k ≥ 2"));
        }
        if cfg.sampling_mode != SamplingMode::Neighbor && cfg.k < count {
            return Err(Error::config("slice-axis TV needs neighbor sampling"));
        }
    }
    let mut xs = initial_states(ctx, ys, keys, cfg)?;
    let mut adapters = initial_adapters(ctx, cfg)?;
    let mut opt = AdamW::new(cfg.lr);
    let mut rngs: Vec<ChaCha8Rng> = keys.iter().map(|&k| stream(cfg.seed, SLICE_STEP_STREAM, k)).collect();
    let mut mc = stream(cfg.seed, MC_STREAM, 0);
    let all = stack_measurements(&ys.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let mut out = Reconstruction {
        volume: Vec::new(),
        adapters: Vec::new(),
        meta_adapters: None,
        trace: Vec::new(),
        counters: Counters::default(),
        probe: None,
    };
    let transitions = ctx.schedule.transitions();
    let timesteps = ctx.schedule.timesteps();
    for (step, &(t, t_prev)) in transitions.iter().enumerate() {
        if cfg.inner_steps > 0 && horizon_gate(t, cfg.zeta, timesteps) {
            out.probe = Some(Probe { t, states: xs.clone() });
            let idx = mc_sample(count, cfg.k, cfg.sampling_mode, &mut mc)?;
            let x_batch = stack(ctx, &idx.iter().map(|&i| xs[i].as_slice()).collect::<Vec<_>>())?;
            let y_batch = stack_measurements(&idx.iter().map(|&i| ys[i].as_slice()).collect::<Vec<_>>())?;
            let before = adapters.clone();
            if cfg.reset_optimizer {
                opt = AdamW::new(cfg.lr);
            }
            let losses = adapt_step(
                ctx,
                &mut adapters,
                &mut opt,
                &x_batch,
                &y_batch,
                t,
                cfg.inner_steps,
                cfg.adapt_cg_iters,
                &mut out.counters,
            )?;
            if meta {
                let alpha = meta_alpha(cfg.meta.alpha_start, cfg.meta.alpha_end, step, transitions.len());
                adapters = reptile_update(&before, &adapters, alpha)?;
            }
            out.trace.extend(losses.into_iter().enumerate().map(|(l, loss)| AdaptRecord {
                slice: None,
                t,
                inner_step: l,
                loss,
            }));
        }
        xs = sample_step(ctx, Some(&adapters), &xs, &all, t, t_prev, &mut rngs, &mut out.counters)?;
    }
    out.volume = xs
        .into_iter()
        .map(|x| x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect();
    out.adapters.push(adapters);
    Ok(out)
}

/// Reverse diffusion with the frozen prior and no adapters; every slice is
/// stepped in one batch, so `Mbir` couples the whole volume.
pub fn reconstruct_without_adaptation(
    ctx: &SolverContext,
    ys: &[Vec<f64>],
    keys: &[u64],
    cfg: &AdaptConfig,
) -> Result<Reconstruction> {
    check_inputs(ctx, ys, keys, cfg)?;
    if cfg.approximator.method == Method::Mbir && ys.len() < 2 {
        return Err(Error::config("slice-axis TV needs at least 2 slices"));
    }
    let mut xs = initial_states(ctx, ys, keys, cfg)?;
    let mut rngs: Vec<ChaCha8Rng> = keys.iter().map(|&k| stream(cfg.seed, SLICE_STEP_STREAM, k)).collect();
    let all = stack_measurements(&ys.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let mut counters = Counters::default();
    for (t, t_prev) in ctx.schedule.transitions() {
        xs = sample_step(ctx, None, &xs, &all, t, t_prev, &mut rngs, &mut counters)?;
    }
    Ok(Reconstruction {
        volume: xs
            .into_iter()
            .map(|x| x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
            .collect(),
        adapters: Vec::new(),
        meta_adapters: None,
        trace: Vec::new(),
        counters,
        probe: None,
    })
}

/// Shared adapters trained on Monte-Carlo slice batches; every slice is
/// stepped with the same adapters at every timestep.
pub fn d3ip_reconstruct(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig) -> Result<Reconstruction> {
    shared(ctx, ys, keys, cfg, false)
}

/// Shared adapters with Reptile updates, then per-slice fine-tuning
/// started from the shared result.
pub fn d3ip_meta_reconstruct(ctx: &SolverContext, ys: &[Vec<f64>], keys: &[u64], cfg: &AdaptConfig) -> Result<Reconstruction> {
    let phase1 = shared(ctx, ys, keys, cfg, true)?;
    let theta = phase1.adapters[0].clone();
    let steps = cfg.meta.finetune_steps.unwrap_or(cfg.inner_steps);
    if steps == 0 {
        return Ok(Reconstruction {
            meta_adapters: Some(theta),
            ..phase1
        });
    }
    let lr = cfg.meta.finetune_lr.unwrap_or(cfg.lr);
    let mut phase2 = per_slice(ctx, ys, keys, cfg, &theta, steps, lr)?;
    let mut trace = phase1.trace;
    trace.append(&mut phase2.trace);
    let mut counters = phase1.counters;
    counters.absorb(phase2.counters);
    Ok(Reconstruction {
        meta_adapters: Some(theta),
        trace,
        counters,
        ..phase2
    })
}
