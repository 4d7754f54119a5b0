//! Variance-preserving noise schedule, forward noising, DDIM updates and
//! denoising score matching.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Tensor};
use crate::denoiser::{DenoiserParams, Trainable};
use crate::error::{Error, Result};
use crate::optim::AdamW;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t ∈ 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
    steps: Vec<usize>,
    eta: f64,
}

/// Linear β schedule with a uniformly spaced DDIM sub-schedule of `nfe`
/// steps descending from `t_start` towards 1.
pub fn make_vp_schedule(
    timesteps: usize,
    beta_min: f64,
    beta_max: f64,
    nfe: usize,
    eta: f64,
    t_start: usize,
) -> Result<NoiseSchedule> {
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    if nfe == 0 || nfe > t_start || t_start > timesteps {
        return Err(Error::config(format!(
            "need 1 ≤ nfe ≤ t_start ≤ T, got nfe={nfe}, t_start={t_start}, T={timesteps}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_min]
    } else {
        (0..timesteps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().expect("non-empty");
        alpha_bars.push(prev * (1.0 - b));
    }
    let steps = if nfe == 1 {
        vec![t_start]
    } else {
        // evenly spaced from t_start down to 1, rounded, strictly decreasing
        (0..nfe)
            .map(|i| {
                let v = t_start as f64 - (t_start - 1) as f64 * i as f64 / (nfe - 1) as f64;
                v.round() as usize
            })
            .collect()
    };
    Ok(NoiseSchedule {
        timesteps,
        betas,
        alpha_bars,
        steps,
        eta,
    })
}

impl NoiseSchedule {
    /// The 1000-step linear schedule with 50 DDIM steps from 980 and η = 0.85.
    pub fn standard() -> Self {
        make_vp_schedule(1000, 1e-4, 2e-2, 50, 0.85, 980).expect("valid defaults")
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t`; `ᾱ_0 = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// DDIM visiting order, strictly decreasing, first entry is the start time.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn t_start(&self) -> usize {
        self.steps[0]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `(t, t_prev)` pairs of the sub-schedule; the final pair ends at 0.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps {
            return Err(Error::invalid(format!("timestep {t} outside 0..={}", self.timesteps)));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t · x₀ + √(1 − ᾱ_t) · ε`.
    pub fn perturb(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::ShapeMismatch {
                op: "perturb",
                lhs: vec![x0.len()],
                rhs: vec![eps.len()],
            });
        }
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// `x̂₀ = (x_t − √(1 − ᾱ_t) · ε) / √ᾱ_t`.
    pub fn tweedie(&self, x_t: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let ab = self.alpha_bar(t);
        if !(ab > 0.0) {
            return Err(Error::invalid(format!("alpha_bar({t}) is zero")));
        }
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(eps).map(|(x, e)| (x - s * e) / a).collect())
    }

    /// One DDIM update from `t` to `t_prev`:
    /// `√ᾱ_prev · x̂₀ + √(1 − ᾱ_prev) · (η · z + (1 − η) · ε^θ)`.
    ///
    /// `x_t` only fixes the expected length. `noise` is required when η > 0.
    pub fn ddim_step(
        &self,
        x_t: &[f64],
        x0_hat: &[f64],
        eps_pred: &[f64],
        t: usize,
        t_prev: usize,
        noise: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if t_prev >= t {
            return Err(Error::invalid(format!("ddim_step needs t > t_prev, got {t} → {t_prev}")));
        }
        let n = x_t.len();
        if x0_hat.len() != n || eps_pred.len() != n || noise.is_some_and(|z| z.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "ddim_step",
                lhs: vec![n],
                rhs: vec![x0_hat.len(), eps_pred.len()],
            });
        }
        let eta = self.eta;
        let ab = self.alpha_bar(t_prev);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        if eta == 0.0 {
            return Ok(x0_hat.iter().zip(eps_pred).map(|(x, e)| a * x + s * e).collect());
        }
        let z = noise.ok_or_else(|| Error::invalid("ddim_step with eta > 0 requires noise"))?;
        Ok((0..n)
            .map(|i| a * x0_hat[i] + s * (eta * z[i] + (1.0 - eta) * eps_pred[i]))
            .collect())
    }

    /// Same schedule with a different stochasticity.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
        }
        Ok(NoiseSchedule { eta, ..self.clone() })
    }
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Training loss trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

impl LossTrace {
    /// Trailing moving average with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = 0.0;
        for (i, l) in self.losses.iter().enumerate() {
            acc += l;
            if i >= w {
                acc -= self.losses[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(f, "{},{l}", i + 1)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Settings for denoising score matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// ε-prediction denoising score matching with Adam on all base weights.
/// `sampler` draws one clean image per call from the supplied RNG.
pub fn dsm_train(
    params: &mut DenoiserParams,
    sampler: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    schedule: &NoiseSchedule,
    settings: DsmSettings,
) -> Result<LossTrace> {
    let DsmSettings { steps, lr, batch, seed } = settings;
    if batch == 0 {
        return Err(Error::config("batch must be positive"));
    }
    let size = params.config.image_size;
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(lr);
    let mut trace = LossTrace::default();
    for step in 0..steps {
        let mut xt = Vec::with_capacity(batch * n);
        let mut target = Vec::with_capacity(batch * n);
        let mut ts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x0 = sampler(&mut rng);
            if x0.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "dsm_train sampler",
                    lhs: vec![x0.len()],
                    rhs: vec![n],
                });
            }
            let t = rng.random_range(1..=schedule.timesteps());
            let eps = standard_normal(&mut rng, n);
            xt.extend(schedule.perturb(&x0, t, &eps)?);
            target.extend(eps);
            ts.push(t);
        }
        let g = Graph::new();
        let bound = params.bind(&g, None, Trainable::Base);
        let x = g.constant(Tensor::new(vec![batch, 1, size, size], xt)?);
        let pred = params.forward(&g, &bound, x, &ts)?;
        let tgt = g.constant(Tensor::new(vec![batch, 1, size, size], target)?);
        let loss = pred.sub(tgt)?.sq_norm()?.scale(1.0 / (batch * n) as f64)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("DSM loss is {value} at step {}", step + 1)));
        }
        trace.losses.push(value);
        let grads = g.backward(loss)?;
        let grads = bound.base_grads(&grads);
        opt.step(&mut params.base_tensors_mut(), &grads)?;
    }
    Ok(trace)
}
