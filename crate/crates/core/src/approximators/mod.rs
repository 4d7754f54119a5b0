//! Conditional posterior-mean estimators `E[x₀ | x_t, y]` built from the
//! denoiser's Tweedie estimate plus a data-consistency correction, and a
//! classical TV baseline without any learned prior.

mod tv;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Graph, Tensor, Var};
use crate::denoiser::{tweedie_var, Adapters, Bound, DenoiserParams, Trainable};
use crate::error::{Error, Result};
use crate::operators::{cg_unrolled, LinearMap, Operator, SliceDifference};
use crate::schedule::NoiseSchedule;

pub use tv::{admm_tv_baseline, tv_z, TvConfig, TvResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dps,
    Ddnm,
    Dds,
    Mbir,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    pub lambda_tv: f64,
    pub iters: usize,
    pub inner_cg_iters: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig::ct()
    }
}

impl AdmmConfig {
    pub fn ct() -> Self {
        AdmmConfig {
            rho: 0.5,
            lambda_tv: 0.01,
            iters: 5,
            inner_cg_iters: 5,
        }
    }

    pub fn mri() -> Self {
        AdmmConfig {
            rho: 1e-3,
            lambda_tv: 1e-5,
            iters: 5,
            inner_cg_iters: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproximatorConfig {
    pub method: Method,
    /// CG iterations for the DDS proximal step or the DDNM pseudo-inverse.
    pub cg_iters: usize,
    pub gamma: f64,
    pub rho_dps: f64,
    pub admm: AdmmConfig,
}

impl Default for ApproximatorConfig {
    fn default() -> Self {
        ApproximatorConfig::for_method(Method::Dds)
    }
}

impl ApproximatorConfig {
    pub fn for_method(method: Method) -> Self {
        ApproximatorConfig {
            method,
            cg_iters: if method == Method::Ddnm { 30 } else { 5 },
            gamma: 5.0,
            rho_dps: 0.5,
            admm: AdmmConfig::ct(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cg_iters == 0 {
            return Err(Error::config("cg_iters must be at least 1"));
        }
        if !(self.gamma > 0.0) || !(self.rho_dps >= 0.0) {
            return Err(Error::config("gamma must be positive and rho_dps non-negative"));
        }
        let a = &self.admm;
        if !(a.rho > 0.0) || !(a.lambda_tv >= 0.0) || a.iters == 0 || a.inner_cg_iters == 0 {
            return Err(Error::config("ADMM settings must be positive"));
        }
        Ok(())
    }
}

fn slices_of(x: Var<'_>, n: usize) -> Result<usize> {
    let total = x.numel();
    if n == 0 || total % n != 0 {
        return Err(Error::ShapeMismatch {
            op: "approximator",
            lhs: x.shape(),
            rhs: vec![n],
        });
    }
    Ok(total / n)
}

fn check_measurements(ys: Var<'_>, op: &Operator, slices: usize) -> Result<()> {
    if ys.numel() != slices * op.measurement_len() {
        return Err(Error::ShapeMismatch {
            op: "approximator measurements",
            lhs: ys.shape(),
            rhs: vec![slices, op.measurement_len()],
        });
    }
    Ok(())
}

/// Proximal data consistency per slice: `iters` CG steps on
/// `(γAᵀA + I) x = γAᵀy + x̂₀`, warm-started at `x̂₀`.
pub fn dds_correct<'g>(x0: Var<'g>, ys: Var<'g>, op: &Operator, gamma: f64, iters: usize) -> Result<(Var<'g>, usize)> {
    let n = op.image_len();
    let b = slices_of(x0, n)?;
    check_measurements(ys, op, b)?;
    let map = op.map();
    let flat = x0.reshape(&[b, n])?;
    let aty = ys.reshape(&[b, op.measurement_len()])?.linear_adjoint(map)?;
    let mut out = Vec::with_capacity(b);
    let mut cg = 0;
    for i in 0..b {
        let xi = flat.slice(0, i, 1)?;
        let rhs = aty.slice(0, i, 1)?.scale(gamma)?.add(xi)?;
        let apply = |v: Var<'g>| v.linear_map(map)?.linear_adjoint(map)?.scale(gamma)?.add(v);
        let (x, k) = cg_unrolled(apply, rhs, xi, iters)?;
        out.push(x);
        cg += k;
    }
    Ok((concat(&out, 0)?.reshape(&x0.shape())?, cg))
}

/// Range-null space projection `x̂₀ + A†(y − A x̂₀)` with `A†` from `iters`
/// CG steps on the normal equations.
pub fn ddnm_correct<'g>(x0: Var<'g>, ys: Var<'g>, op: &Operator, iters: usize) -> Result<(Var<'g>, usize)> {
    let n = op.image_len();
    let b = slices_of(x0, n)?;
    check_measurements(ys, op, b)?;
    let map = op.map();
    let g = x0.graph();
    let flat = x0.reshape(&[b, n])?;
    let resid = ys.reshape(&[b, op.measurement_len()])?.sub(flat.linear_map(map)?)?;
    let rhs_all = resid.linear_adjoint(map)?;
    let mut out = Vec::with_capacity(b);
    let mut cg = 0;
    for i in 0..b {
        let rhs = rhs_all.slice(0, i, 1)?;
        let zero = g.constant(Tensor::zeros(&[1, n]));
        let apply = |v: Var<'g>| v.linear_map(map)?.linear_adjoint(map);
        let (z, k) = cg_unrolled(apply, rhs, zero, iters)?;
        out.push(flat.slice(0, i, 1)?.add(z)?);
        cg += k;
    }
    Ok((concat(&out, 0)?.reshape(&x0.shape())?, cg))
}

/// ADMM for `γ/2 ‖Y − AX‖² + ½ ‖X − X̂₀‖² + λ ‖T X‖₁` over a contiguous
/// slice block, with `T` the difference along the slice axis. Each
/// x-update restarts CG from `X̂₀`. With `λ = 0` this is per-slice DDS.
pub fn mbir_correct<'g>(
    x0: Var<'g>,
    ys: Var<'g>,
    op: &Operator,
    gamma: f64,
    admm: &AdmmConfig,
) -> Result<(Var<'g>, usize)> {
    let n = op.image_len();
    let slices = slices_of(x0, n)?;
    if slices < 2 {
        return Err(Error::invalid("slice-axis TV needs at least two slices"));
    }
    check_measurements(ys, op, slices)?;
    if admm.lambda_tv == 0.0 {
        return dds_correct(x0, ys, op, gamma, admm.inner_cg_iters);
    }
    let g = x0.graph();
    let map = op.map();
    let diff: Arc<dyn LinearMap> = Arc::new(SliceDifference {
        slices,
        slice_len: n,
    });
    let total = slices * n;
    let flat = x0.reshape(&[1, total])?;
    let data_rhs = ys
        .reshape(&[slices, op.measurement_len()])?
        .linear_adjoint(map)?
        .reshape(&[1, total])?
        .scale(gamma)?
        .add(flat)?;
    let rho = admm.rho;
    let apply = |v: Var<'g>| -> Result<Var<'g>> {
        let data = v.linear_map(map)?.linear_adjoint(map)?.reshape(&[1, total])?.scale(gamma)?;
        let tv = v.linear_map(&diff)?.linear_adjoint(&diff)?.scale(rho)?;
        data.add(v)?.add(tv)
    };
    let mut z = g.constant(Tensor::zeros(&[1, (slices - 1) * n]));
    let mut u = z;
    let mut x = flat;
    let mut cg = 0;
    for _ in 0..admm.iters {
        let rhs = data_rhs.add(z.sub(u)?.linear_adjoint(&diff)?.scale(rho)?)?;
        let (xk, k) = cg_unrolled(apply, rhs, flat, admm.inner_cg_iters)?;
        cg += k;
        x = xk;
        let tx = x.linear_map(&diff)?;
        z = tx.add(u)?.soft_threshold(admm.lambda_tv / rho)?;
        u = u.add(tx)?.sub(z)?;
    }
    Ok((x.reshape(&x0.shape())?, cg))
}

/// Everything a posterior-mean estimate depends on besides the state.
#[derive(Debug, Clone, Copy)]
pub struct SolverContext<'a> {
    pub net: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
    pub op: &'a Operator,
    pub config: &'a ApproximatorConfig,
}

/// Recorded quantities of one estimate.
pub struct Estimate<'g> {
    pub bound: Bound<'g>,
    pub eps: Var<'g>,
    pub tweedie: Var<'g>,
    pub mean: Var<'g>,
    pub cg_iterations: usize,
}

/// Gradient of `Σ_i ‖y_i − A x̂₀(x_t)_i‖` with respect to `x_t`, network frozen.
fn dps_guidance(
    ctx: &SolverContext,
    adapters: Option<&Adapters>,
    x_t: &Tensor,
    ys: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = ctx.net.bind(&g, adapters, Trainable::Nothing);
    let x = g.leaf(x_t.clone(), true);
    let b = x_t.shape()[0];
    let eps = ctx.net.forward(&g, &bound, x, &vec![t; b])?;
    let x0 = tweedie_var(x, eps, t, ctx.schedule)?;
    let y = g.constant(ys.clone().reshaped(&[b, ctx.op.measurement_len()])?);
    let resid = y.sub(x0.linear_map(ctx.op.map())?)?;
    let mut total = resid.slice(0, 0, 1)?.l2_norm()?;
    for i in 1..b {
        total = total.add(resid.slice(0, i, 1)?.l2_norm()?)?;
    }
    Ok(g.backward(total)?.get(x))
}

/// Posterior-mean estimate for a stack `x_t: [B, 1, H, W]` with
/// measurements `ys: [B, m]`, recorded on `g`. For `Mbir` the stack must be
/// a contiguous slice block. `cg_iters` overrides the configured iteration
/// count (the inner CG count for `Mbir`).
pub fn estimate<'g>(
    g: &'g Graph,
    ctx: &SolverContext,
    adapters: Option<&Adapters>,
    trainable: Trainable,
    x_t: &Tensor,
    ys: &Tensor,
    t: usize,
    cg_iters: Option<usize>,
) -> Result<Estimate<'g>> {
    let cfg = ctx.config;
    let size = ctx.net.config.image_size;
    if x_t.shape().len() != 4 || x_t.shape()[1] != 1 || x_t.shape()[2] != size || x_t.shape()[3] != size {
        return Err(Error::ShapeMismatch {
            op: "estimate",
            lhs: x_t.shape().to_vec(),
            rhs: vec![0, 1, size, size],
        });
    }
    let b = x_t.shape()[0];
    let bound = ctx.net.bind(g, adapters, trainable);
    let x = g.constant(x_t.clone());
    let eps = ctx.net.forward(g, &bound, x, &vec![t; b])?;
    let tweedie = tweedie_var(x, eps, t, ctx.schedule)?;
    let y = g.constant(ys.clone());
    let (mean, cg_iterations) = match cfg.method {
        Method::Dds => dds_correct(tweedie, y, ctx.op, cfg.gamma, cg_iters.unwrap_or(cfg.cg_iters))?,
        Method::Ddnm => ddnm_correct(tweedie, y, ctx.op, cg_iters.unwrap_or(cfg.cg_iters))?,
        Method::Mbir => {
            let admm = AdmmConfig {
                inner_cg_iters: cg_iters.unwrap_or(cfg.admm.inner_cg_iters),
                ..cfg.admm
            };
            mbir_correct(tweedie, y, ctx.op, cfg.gamma, &admm)?
        }
        Method::Dps => {
            let guidance = dps_guidance(ctx, adapters, x_t, ys, t)?;
            let correction = g.constant(guidance).scale(cfg.rho_dps)?;
            (tweedie.sub(correction)?, 0)
        }
    };
    Ok(Estimate {
        bound,
        eps,
        tweedie,
        mean,
        cg_iterations,
    })
}

/// Posterior mean without gradient tracking, using the configured method.
pub fn posterior_mean(
    ctx: &SolverContext,
    adapters: Option<&Adapters>,
    x_t: &Tensor,
    ys: &Tensor,
    t: usize,
) -> Result<Tensor> {
    let g = Graph::new();
    let est = estimate(&g, ctx, adapters, Trainable::Nothing, x_t, ys, t, None)?;
    let out = (*est.mean.value()).clone();
    Ok(out)
}

fn with_method(ctx: &SolverContext, method: Method, f: impl FnOnce(&SolverContext) -> Result<Tensor>) -> Result<Tensor> {
    let cfg = ApproximatorConfig { method, ..*ctx.config };
    f(&SolverContext { config: &cfg, ..*ctx })
}

pub fn dps_mean(ctx: &SolverContext, x_t: &Tensor, ys: &Tensor, t: usize) -> Result<Tensor> {
    with_method(ctx, Method::Dps, |c| posterior_mean(c, None, x_t, ys, t))
}

pub fn ddnm_mean(ctx: &SolverContext, x_t: &Tensor, ys: &Tensor, t: usize) -> Result<Tensor> {
    with_method(ctx, Method::Ddnm, |c| posterior_mean(c, None, x_t, ys, t))
}

pub fn dds_mean(ctx: &SolverContext, x_t: &Tensor, ys: &Tensor, t: usize) -> Result<Tensor> {
    with_method(ctx, Method::Dds, |c| posterior_mean(c, None, x_t, ys, t))
}

pub fn mbir_mean(ctx: &SolverContext, x_t: &Tensor, ys: &Tensor, t: usize) -> Result<Tensor> {
    with_method(ctx, Method::Mbir, |c| posterior_mean(c, None, x_t, ys, t))
}
