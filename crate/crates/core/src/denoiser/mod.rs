//! Time-conditioned convolutional noise predictor with optional low-rank
//! adapters on the residual-block convolutions.
//!
//! Layout: a 3×3 input convolution, one resolution level per channel
//! multiplier (each with `num_res_blocks` residual blocks, average pooling
//! between levels), a middle residual block, a mirrored decoder with
//! skip concatenation and nearest upsampling, and a normalized 3×3 output
//! convolution. Timesteps enter through a sinusoidal embedding and a
//! two-layer MLP whose output is projected into every residual block.

mod checkpoint;
mod lora;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{concat, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::schedule::{standard_normal, NoiseSchedule};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lora::{Adapters, LoraPair, RESIDUAL_CONVS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    /// Resolutions that would carry self-attention. Attention is not
    /// implemented, so this must stay empty.
    pub use_attention_at: Vec<usize>,
    /// Number of diffusion steps the network is conditioned on.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            base_channels: 16,
            channel_multipliers: vec![1, 2],
            num_res_blocks: 1,
            time_embed_dim: 32,
            norm_groups: 4,
            use_attention_at: Vec::new(),
            timesteps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if s == 0 || !s.is_power_of_two() || s > 64 {
            return Err(Error::config(format!("image_size must be a power of two ≤ 64, got {s}")));
        }
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) {
            return Err(Error::config("channel_multipliers must be non-empty and positive"));
        }
        if s % (1 << (levels - 1)) != 0 {
            return Err(Error::config(format!(
                "image_size {s} not divisible by 2^{}",
                levels - 1
            )));
        }
        if self.base_channels == 0 || self.num_res_blocks == 0 || self.timesteps == 0 {
            return Err(Error::config("base_channels, num_res_blocks and timesteps must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even and ≥ 2"));
        }
        if !self.use_attention_at.is_empty() {
            return Err(Error::config("attention layers are not supported; use_attention_at must be empty"));
        }
        for m in &self.channel_multipliers {
            let c = self.base_channels * m;
            if self.norm_groups == 0 || c % self.norm_groups != 0 {
                return Err(Error::config(format!(
                    "{c} channels not divisible by norm_groups = {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    /// `(name, in_channels, out_channels)` for every residual block in
    /// forward order.
    fn res_blocks(&self) -> Vec<(String, usize, usize)> {
        let levels = self.channel_multipliers.len();
        let mut blocks = Vec::new();
        let mut ch = self.channels(0);
        let mut skips = Vec::new();
        for l in 0..levels {
            for r in 0..self.num_res_blocks {
                blocks.push((format!("down{l}.res{r}"), ch, self.channels(l)));
                ch = self.channels(l);
            }
            skips.push(ch);
        }
        blocks.push(("mid.res0".to_string(), ch, ch));
        for l in (0..levels).rev() {
            let skip = skips[l];
            for r in 0..self.num_res_blocks {
                let cin = if r == 0 { ch + skip } else { self.channels(l) };
                blocks.push((format!("up{l}.res{r}"), cin, self.channels(l)));
                ch = self.channels(l);
            }
        }
        blocks
    }
}

/// Which leaves of a bound network receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Base weights plus optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub base: BTreeMap<String, Tensor>,
    pub adapters: Option<Adapters>,
}

/// Network parameters recorded as leaves of one graph.
pub struct Bound<'g> {
    base: BTreeMap<String, Var<'g>>,
    lora: BTreeMap<String, (Var<'g>, Var<'g>)>,
    scale: f64,
}

impl<'g> Bound<'g> {
    fn get(&self, name: &str) -> Result<Var<'g>> {
        self.base
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Effective convolution kernel, including the low-rank update when
    /// this layer carries an adapter.
    fn conv_weight(&self, name: &str) -> Result<Var<'g>> {
        let w = self.get(name)?;
        match self.lora.get(name) {
            None => Ok(w),
            Some(&(down, up)) => {
                let delta = up.matmul(down)?.scale(self.scale)?.reshape(&w.shape())?;
                w.add(delta)
            }
        }
    }

    /// Gradients of the base weights in name order.
    pub fn base_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.base.values().map(|&v| grads.get(v)).collect()
    }

    /// Gradients of the adapters in [`Adapters::tensors`] order.
    pub fn adapter_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.lora
            .values()
            .flat_map(|&(down, up)| [grads.get(down), grads.get(up)])
            .collect()
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = standard_normal(rng, n).into_iter().map(|v| v * std).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Deterministically initialized network for `config`.
pub fn build_denoiser(config: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = BTreeMap::new();
    let d = config.time_embed_dim;
    let conv = |base: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize, k: usize, gain: f64| {
        let fan_in = (cin * k * k) as f64;
        base.insert(format!("{name}.weight"), normal(rng, &[cout, cin, k, k], gain / fan_in.sqrt()));
        base.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    };
    let linear = |base: &mut BTreeMap<String, Tensor>, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize| {
        base.insert(format!("{name}.weight"), normal(rng, &[din, dout], 1.0 / (din as f64).sqrt()));
        base.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
    };
    let norm = |base: &mut BTreeMap<String, Tensor>, name: &str, c: usize| {
        base.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        base.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    };
    linear(&mut base, &mut rng, "time.lin1", d, d);
    linear(&mut base, &mut rng, "time.lin2", d, d);
    let c0 = config.channels(0);
    conv(&mut base, &mut rng, "conv_in", c0, 1, 3, 1.0);
    for (name, cin, cout) in config.res_blocks() {
        norm(&mut base, &format!("{name}.norm1"), cin);
        conv(&mut base, &mut rng, &format!("{name}.conv1"), cout, cin, 3, 1.0);
        linear(&mut base, &mut rng, &format!("{name}.temb"), d, cout);
        norm(&mut base, &format!("{name}.norm2"), cout);
        conv(&mut base, &mut rng, &format!("{name}.conv2"), cout, cout, 3, 0.5);
        if cin != cout {
            conv(&mut base, &mut rng, &format!("{name}.skip"), cout, cin, 1, 1.0);
        }
    }
    norm(&mut base, "out_norm", c0);
    conv(&mut base, &mut rng, "conv_out", 1, c0, 3, 0.1);
    Ok(DenoiserParams {
        config: config.clone(),
        base,
        adapters: None,
    })
}

impl DenoiserParams {
    pub fn num_base_params(&self) -> usize {
        self.base.values().map(Tensor::numel).sum()
    }

    /// Adapter parameters as a fraction of base plus adapter parameters.
    pub fn adapter_fraction(&self) -> f64 {
        let a = self.adapters.as_ref().map_or(0, Adapters::num_params);
        a as f64 / (a + self.num_base_params()) as f64
    }

    /// SHA-256 over the base weights; changes if any base value changes.
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.base {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn base_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.base.values_mut().collect()
    }

    /// Adds fresh adapters of `rank` to every 4-D convolution weight whose
    /// name contains `filter`. Up-projections start at zero, so the adapted
    /// network initially equals the base network.
    pub fn inject_lora(&self, rank: usize, scale: f64, filter: &str, seed: u64) -> Result<DenoiserParams> {
        let adapters = Adapters::init(self, rank, scale, filter, seed)?;
        Ok(DenoiserParams {
            adapters: Some(adapters),
            ..self.clone()
        })
    }

    /// Records the parameters on `g`. `adapters` overrides the stored ones.
    pub fn bind<'g>(&self, g: &'g Graph, adapters: Option<&Adapters>, trainable: Trainable) -> Bound<'g> {
        let base = self
            .base
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable == Trainable::Base)))
            .collect();
        let adapters = adapters.or(self.adapters.as_ref());
        let lora = adapters
            .map(|a| {
                a.layers
                    .iter()
                    .map(|(k, p)| {
                        let train = trainable == Trainable::Adapters;
                        (k.clone(), (g.leaf(p.down.clone(), train), g.leaf(p.up.clone(), train)))
                    })
                    .collect()
            })
            .unwrap_or_default();
        Bound {
            base,
            lora,
            scale: adapters.map_or(1.0, |a| a.scale),
        }
    }

    fn conv<'g>(&self, b: &Bound<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let w = b.conv_weight(&format!("{name}.weight"))?;
        let bias = b.get(&format!("{name}.bias"))?;
        let y = x.conv2d(w)?;
        let c = bias.numel();
        let bias = bias.reshape(&[1, c, 1, 1])?.broadcast_to(&y.shape())?;
        y.add(bias)
    }

    fn linear<'g>(&self, b: &Bound<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(b.get(&format!("{name}.weight"))?)?;
        let bias = b.get(&format!("{name}.bias"))?.broadcast_to(&y.shape())?;
        y.add(bias)
    }

    fn norm_act<'g>(&self, b: &Bound<'g>, name: &str, x: Var<'g>) -> Result<Var<'g>> {
        let gamma = b.get(&format!("{name}.gamma"))?;
        let beta = b.get(&format!("{name}.beta"))?;
        x.group_norm(gamma, beta, self.config.norm_groups)?.silu()
    }

    fn res_block<'g>(&self, b: &Bound<'g>, name: &str, x: Var<'g>, temb: Var<'g>) -> Result<Var<'g>> {
        let h = self.norm_act(b, &format!("{name}.norm1"), x)?;
        let h = self.conv(b, &format!("{name}.conv1"), h)?;
        let shape = h.shape();
        let t = self
            .linear(b, &format!("{name}.temb"), temb)?
            .reshape(&[shape[0], shape[1], 1, 1])?
            .broadcast_to(&shape)?;
        let h = h.add(t)?;
        let h = self.norm_act(b, &format!("{name}.norm2"), h)?;
        let h = self.conv(b, &format!("{name}.conv2"), h)?;
        let skip = if b.base.contains_key(&format!("{name}.skip.weight")) {
            self.conv(b, &format!("{name}.skip"), x)?
        } else {
            x
        };
        skip.add(h)
    }

    fn time_embedding<'g>(&self, g: &'g Graph, b: &Bound<'g>, ts: &[usize]) -> Result<Var<'g>> {
        let half = self.config.time_embed_dim / 2;
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
            .collect();
        let mut args = Vec::with_capacity(ts.len() * half);
        for &t in ts {
            args.extend(freqs.iter().map(|f| t as f64 * f));
        }
        let args = g.constant(Tensor::new(vec![ts.len(), half], args)?);
        let emb = concat(&[args.sin()?, args.cos()?], 1)?;
        let h = self.linear(b, "time.lin1", emb)?.silu()?;
        self.linear(b, "time.lin2", h)?.silu()
    }

    /// Predicted noise for a batch `x: [B, 1, H, W]` at timesteps `ts` (one per
    /// batch element).
    pub fn forward<'g>(&self, g: &'g Graph, b: &Bound<'g>, x: Var<'g>, ts: &[usize]) -> Result<Var<'g>> {
        let cfg = &self.config;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
            return Err(Error::ShapeMismatch {
                op: "denoiser forward",
                lhs: shape,
                rhs: vec![ts.len(), 1, cfg.image_size, cfg.image_size],
            });
        }
        if ts.len() != shape[0] {
            return Err(Error::invalid(format!("{} timesteps for a batch of {}", ts.len(), shape[0])));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > cfg.timesteps) {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", cfg.timesteps)));
        }
        let temb = self.time_embedding(g, b, ts)?;
        let levels = cfg.channel_multipliers.len();
        let mut h = self.conv(b, "conv_in", x)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            for r in 0..cfg.num_res_blocks {
                h = self.res_block(b, &format!("down{l}.res{r}"), h, temb)?;
            }
            skips.push(h);
            if l + 1 < levels {
                h = h.avgpool2x()?;
            }
        }
        h = self.res_block(b, "mid.res0", h, temb)?;
        for l in (0..levels).rev() {
            h = concat(&[h, skips[l]], 1)?;
            for r in 0..cfg.num_res_blocks {
                h = self.res_block(b, &format!("up{l}.res{r}"), h, temb)?;
            }
            if l > 0 {
                h = h.upsample2x()?;
            }
        }
        let h = self.norm_act(b, "out_norm", h)?;
        self.conv(b, "conv_out", h)
    }

    /// ε^θ for a single image without gradient tracking.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let size = self.config.image_size;
        let batch = x_t.numel() / (size * size).max(1);
        if batch * size * size != x_t.numel() || batch == 0 {
            return Err(Error::ShapeMismatch {
                op: "predict_eps",
                lhs: x_t.shape().to_vec(),
                rhs: vec![size, size],
            });
        }
        let g = Graph::new();
        let b = self.bind(&g, None, Trainable::Nothing);
        let x = g.constant(x_t.clone().reshaped(&[batch, 1, size, size])?);
        let eps = self.forward(&g, &b, x, &vec![t; batch])?;
        let out = (*eps.value()).clone();
        out.reshaped(x_t.shape())
    }

    /// Tweedie estimate `x̂₀` from the predicted noise.
    pub fn tweedie_x0(&self, x_t: &Tensor, t: usize, schedule: &NoiseSchedule) -> Result<Tensor> {
        let eps = self.predict_eps(x_t, t)?;
        let x0 = schedule.tweedie(x_t.data(), eps.data(), t)?;
        Tensor::new(x_t.shape().to_vec(), x0)
    }
}

/// Differentiable Tweedie conversion on recorded values.
pub fn tweedie_var<'g>(x_t: Var<'g>, eps: Var<'g>, t: usize, schedule: &NoiseSchedule) -> Result<Var<'g>> {
    let ab = schedule.alpha_bar(t);
    if !(ab > 0.0) {
        return Err(Error::invalid(format!("alpha_bar({t}) is zero")));
    }
    x_t.sub(eps.scale((1.0 - ab).sqrt())?)?.scale(1.0 / ab.sqrt())
}
