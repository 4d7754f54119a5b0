use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::stream;
use crate::autodiff::{Graph, Tensor};
use crate::denoiser::{build_denoiser, DenoiserConfig, Trainable};
use crate::error::{Error, Result};
use crate::operators::Operator;
use crate::optim::AdamW;
use crate::schedule::standard_normal;

const INPUT_STREAM: u64 = 11;
const HOLDOUT_STREAM: u64 = 12;

/// Deep-image-prior baseline: an untrained network fitted to one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipConfig {
    pub net: DenoiserConfig,
    pub steps: usize,
    pub lr: f64,
    /// Fraction of measurement entries withheld from the fit and used to
    /// pick the returned iterate; 0 returns the last iterate.
    pub holdout_fraction: f64,
    pub eval_every: usize,
    /// Fixed timestep fed to the network's time embedding.
    pub input_t: usize,
    pub seed: u64,
}

impl Default for DipConfig {
    fn default() -> Self {
        DipConfig {
            net: DenoiserConfig {
                base_channels: 8,
                ..DenoiserConfig::default()
            },
            steps: 1000,
            lr: 2e-3,
            holdout_fraction: 0.1,
            eval_every: 10,
            input_t: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DipResult {
    pub x: Vec<f64>,
    /// Fit loss on the retained entries, per step.
    pub losses: Vec<f64>,
    /// `(step, held-out loss)` at each evaluation.
    pub holdout: Vec<(usize, f64)>,
    pub best_step: usize,
}

/// Fits a freshly initialized network `G(z)` with fixed input `z` so that
/// `A G(z)` matches the retained entries of `y`.
pub fn dip_baseline(y: &[f64], op: &Operator, cfg: &DipConfig) -> Result<DipResult> {
    if cfg.net.image_size != op.spec().image_size {
        return Err(Error::config("DIP network and operator image sizes differ"));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || cfg.eval_every == 0 {
        return Err(Error::config("holdout_fraction must lie in [0, 1) and eval_every must be positive"));
    }
    if y.len() != op.measurement_len() {
        return Err(Error::ShapeMismatch {
            op: "dip_baseline",
            lhs: vec![y.len()],
            rhs: vec![op.measurement_len()],
        });
    }
    let mut net = build_denoiser(&cfg.net, cfg.seed)?;
    let s = cfg.net.image_size;
    let z = Tensor::new(vec![1, 1, s, s], standard_normal(&mut stream(cfg.seed, INPUT_STREAM, 0), s * s))?;
    let m = y.len();
    let held = (m as f64 * cfg.holdout_fraction).round() as usize;
    let mut fit_mask = vec![1.0; m];
    for i in index::sample(&mut stream(cfg.seed, HOLDOUT_STREAM, 0), m, held) {
        fit_mask[i] = 0.0;
    }
    let hold_mask: Vec<f64> = fit_mask.iter().map(|v| 1.0 - v).collect();
    let target = Tensor::new(vec![1, m], y.to_vec())?;
    let fit_mask = Tensor::new(vec![1, m], fit_mask)?;
    let mut opt = AdamW::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut holdout = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for step in 0..=cfg.steps {
        let g = Graph::new();
        let bound = net.bind(&g, None, Trainable::Base);
        let out = net.forward(&g, &bound, g.constant(z.clone()), &[cfg.input_t])?;
        let resid = g.constant(target.clone()).sub(out.linear_map(op.map())?)?;
        if held > 0 && step % cfg.eval_every == 0 {
            let r = resid.value();
            let loss: f64 = r.data().iter().zip(&hold_mask).map(|(v, w)| w * v * v).sum();
            holdout.push((step, loss));
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, step, out.value().data().to_vec()));
            }
        }
        if step == cfg.steps {
            if held == 0 {
                best = Some((0.0, step, out.value().data().to_vec()));
            }
            break;
        }
        let loss = resid.mul(g.constant(fit_mask.clone()))?.sq_norm()?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("DIP loss is {value} at step {step}")));
        }
        losses.push(value);
        let grads = bound.base_grads(&g.backward(loss)?);
        opt.step(&mut net.base_tensors_mut(), &grads)?;
    }
    let (_, best_step, x) = best.expect("at least one evaluation");
    Ok(DipResult {
        x: x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        losses,
        holdout,
        best_step,
    })
}
