//! Little-endian binary checkpoints.
//!
//! Base weights: `b"DDIPCKPT"`, `u32` version, `u32` length + JSON config,
//! `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `u32` dims, `f64` values.
//!
//! Adapters live in a separate file: `b"DDIPLORA"`, `u32` version,
//! `u32` rank, `f64` scale, `u32` layer count, then per layer the name and
//! the `down` and `up` tensors encoded as above.

use std::collections::BTreeMap;
use std::path::Path;

use super::{build_denoiser, Adapters, DenoiserConfig, DenoiserParams, LoraPair};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const BASE_MAGIC: &[u8; 8] = b"DDIPCKPT";
const LORA_MAGIC: &[u8; 8] = b"DDIPLORA";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend((v as u32).to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len());
    buf.extend(s.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u32(buf, t.shape().len());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 name".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > self.bytes.len() / 8 {
            return Err(Error::Format("tensor larger than file".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite weight".into()));
        }
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::Format("wrong file magic".into()));
        }
        let v = self.u32()?;
        if v != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

impl DenoiserParams {
    pub fn base_to_bytes(&self) -> Vec<u8> {
        let mut buf = BASE_MAGIC.to_vec();
        put_u32(&mut buf, VERSION as usize);
        put_str(&mut buf, &serde_json::to_string(&self.config).expect("config serializes"));
        put_u32(&mut buf, self.base.len());
        for (name, t) in &self.base {
            put_str(&mut buf, name);
            put_tensor(&mut buf, t);
        }
        buf
    }

    /// Parses base weights and checks them against the layout implied by
    /// the embedded config.
    pub fn base_from_bytes(bytes: &[u8]) -> Result<DenoiserParams> {
        let mut r = Reader { bytes, pos: 0 };
        r.header(BASE_MAGIC)?;
        let config: DenoiserConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("config: {e}")))?;
        let count = r.u32()?;
        let mut base = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            base.insert(name, r.tensor()?);
        }
        let reference = build_denoiser(&config, 0)?;
        let layout_matches = reference.base.len() == base.len()
            && reference
                .base
                .iter()
                .zip(&base)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape());
        if !layout_matches {
            return Err(Error::Format("weights do not match the configured architecture".into()));
        }
        Ok(DenoiserParams {
            config,
            base,
            adapters: None,
        })
    }
}

impl Adapters {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = LORA_MAGIC.to_vec();
        put_u32(&mut buf, VERSION as usize);
        put_u32(&mut buf, self.rank);
        buf.extend(self.scale.to_le_bytes());
        put_u32(&mut buf, self.layers.len());
        for (name, p) in &self.layers {
            put_str(&mut buf, name);
            put_tensor(&mut buf, &p.down);
            put_tensor(&mut buf, &p.up);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Adapters> {
        let mut r = Reader { bytes, pos: 0 };
        r.header(LORA_MAGIC)?;
        let rank = r.u32()?;
        let scale = r.f64()?;
        let count = r.u32()?;
        let mut layers = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let down = r.tensor()?;
            let up = r.tensor()?;
            if down.shape().len() != 2 || up.shape().len() != 2 || down.shape()[0] != rank || up.shape()[1] != rank {
                return Err(Error::Format(format!("adapter {name} has inconsistent rank")));
            }
            layers.insert(name, LoraPair { down, up });
        }
        Ok(Adapters { rank, scale, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Adapters> {
        Adapters::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes base weights to `path`; adapters, if any, go to `path` with the
/// extension `lora`.
pub fn save_checkpoint(path: &Path, params: &DenoiserParams) -> Result<()> {
    std::fs::write(path, params.base_to_bytes())?;
    if let Some(a) = &params.adapters {
        a.save(&path.with_extension("lora"))?;
    }
    Ok(())
}

/// Reads base weights and, when present alongside, adapters.
pub fn load_checkpoint(path: &Path) -> Result<DenoiserParams> {
    let mut params = DenoiserParams::base_from_bytes(&std::fs::read(path)?)?;
    let lora = path.with_extension("lora");
    if lora.exists() {
        params.adapters = Some(Adapters::load(&lora)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let cfg = DenoiserConfig {
            image_size: 8,
            base_channels: 4,
            time_embed_dim: 8,
            norm_groups: 2,
            ..DenoiserConfig::default()
        };
        let p = build_denoiser(&cfg, 1).unwrap().inject_lora(2, 1.0, ".res", 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        bytes[0] = b'X';
        assert!(DenoiserParams::base_from_bytes(&bytes).is_err());
    }
}
