use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{normal, DenoiserParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Layer-name filter selecting every residual-block convolution.
pub const RESIDUAL_CONVS: &str = ".res";

/// One low-rank update `ΔW = scale · up · down`, reshaped to the kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// `rank × (in · k · k)`, random at initialization.
    pub down: Tensor,
    /// `out × rank`, zero at initialization.
    pub up: Tensor,
}

/// Adapters for a set of convolution layers, keyed by weight name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub rank: usize,
    pub scale: f64,
    pub layers: BTreeMap<String, LoraPair>,
}

impl Adapters {
    pub(super) fn init(params: &DenoiserParams, rank: usize, scale: f64, filter: &str, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = BTreeMap::new();
        for (name, w) in &params.base {
            if w.shape().len() != 4 || !name.contains(filter) {
                continue;
            }
            let (out, fan_in) = (w.shape()[0], w.shape()[1..].iter().product::<usize>());
            layers.insert(
                name.clone(),
                LoraPair {
                    down: normal(&mut rng, &[rank, fan_in], 1.0 / (fan_in as f64).sqrt()),
                    up: Tensor::zeros(&[out, rank]),
                },
            );
        }
        if layers.is_empty() {
            return Err(Error::invalid(format!("no convolution layer matches `{filter}`")));
        }
        Ok(Adapters { rank, scale, layers })
    }

    pub fn num_params(&self) -> usize {
        self.layers.values().map(|p| p.down.numel() + p.up.numel()).sum()
    }

    /// All adapter tensors in a stable order: per layer (sorted by name),
    /// `down` then `up`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.values().flat_map(|p| [&p.down, &p.up]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .values_mut()
            .flat_map(|p| [&mut p.down, &mut p.up])
            .collect()
    }

    fn congruent(&self, other: &Adapters) -> bool {
        self.rank == other.rank
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|((ka, a), (kb, b))| {
                ka == kb && a.down.shape() == b.down.shape() && a.up.shape() == b.up.shape()
            })
    }

    /// Reptile step `self + α (target − self)`.
    pub fn reptile_update(&self, target: &Adapters, alpha: f64) -> Result<Adapters> {
        if !self.congruent(target) {
            return Err(Error::invalid("reptile_update on incongruent adapter sets"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid(format!("reptile step size must lie in (0, 1], got {alpha}")));
        }
        let mut out = self.clone();
        for (o, t) in out.tensors_mut().into_iter().zip(target.tensors()) {
            for (v, tv) in o.data_mut().iter_mut().zip(t.data()) {
                *v += alpha * (tv - *v);
            }
        }
        Ok(out)
    }

    /// The leading `rank` components; the remaining ones must be zero for
    /// the truncated update to equal the full one.
    pub fn truncated(&self, rank: usize) -> Result<Adapters> {
        if rank == 0 || rank > self.rank {
            return Err(Error::invalid(format!("cannot truncate rank {} to {rank}", self.rank)));
        }
        let layers = self
            .layers
            .iter()
            .map(|(k, p)| {
                let fan_in = p.down.shape()[1];
                let out = p.up.shape()[0];
                let down = Tensor::new(vec![rank, fan_in], p.down.data()[..rank * fan_in].to_vec())?;
                let up_data = (0..out)
                    .flat_map(|o| p.up.data()[o * self.rank..o * self.rank + rank].iter().copied())
                    .collect();
                let up = Tensor::new(vec![out, rank], up_data)?;
                Ok((k.clone(), LoraPair { down, up }))
            })
            .collect::<Result<_>>()?;
        Ok(Adapters {
            rank,
            scale: self.scale,
            layers,
        })
    }
}
