//! Raw little-endian `f32` arrays with TOML sidecars.
//!
//! A measurement `foo.bin` is accompanied by `foo.toml` holding the shape,
//! element type, noise level, seed, operator description and its hash.
//! Complex k-space data is stored as interleaved `(re, im)` pairs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{OperatorKind, OperatorSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Complex64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeasurementSidecar {
    shape: Vec<usize>,
    dtype: Dtype,
    sigma_y: f64,
    seed: u64,
    operator_hash: String,
    operator: OperatorSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeSidecar {
    shape: Vec<usize>,
    dtype: Dtype,
}

/// Per-slice measurements together with the operator that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub spec: OperatorSpec,
    pub seed: u64,
    pub slices: Vec<Vec<f64>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn write_f32(path: &Path, data: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = data.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            4 * expected
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("{}: non-finite values", path.display())));
    }
    Ok(data)
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_measurement(path: &Path, m: &Measurement) -> Result<()> {
    let per_slice = m.slices.first().map_or(0, Vec::len);
    if m.slices.iter().any(|s| s.len() != per_slice) {
        return Err(Error::invalid("measurement slices differ in length"));
    }
    let complex = matches!(
        m.spec.kind,
        OperatorKind::MriSingle { .. } | OperatorKind::MriMulticoil { .. }
    );
    let (dtype, shape) = if complex {
        (Dtype::Complex64, vec![m.slices.len(), per_slice / 2])
    } else {
        (Dtype::Float32, vec![m.slices.len(), per_slice])
    };
    write_f32(path, m.slices.iter().flatten().copied())?;
    write_toml(
        &sidecar_path(path),
        &MeasurementSidecar {
            shape,
            dtype,
            sigma_y: m.spec.sigma_y,
            seed: m.seed,
            operator_hash: m.spec.hash(),
            operator: m.spec.clone(),
        },
    )
}

/// Loads a measurement and checks it against its sidecar: shape, operator
/// hash and finiteness.
pub fn read_measurement(path: &Path) -> Result<Measurement> {
    let side: MeasurementSidecar = read_toml(&sidecar_path(path))?;
    if side.operator.hash() != side.operator_hash {
        return Err(Error::Format("operator hash does not match sidecar operator".into()));
    }
    let width = match side.dtype {
        Dtype::Float32 => 1,
        Dtype::Complex64 => 2,
    };
    let (slices, per) = match side.shape.as_slice() {
        &[n, m] => (n, m * width),
        _ => return Err(Error::Format(format!("bad measurement shape {:?}", side.shape))),
    };
    let expected = side.operator.build()?.measurement_len();
    if per != expected {
        return Err(Error::Format(format!(
            "measurement has {per} values per slice, operator produces {expected}"
        )));
    }
    let data = read_f32(path, slices * per)?;
    Ok(Measurement {
        spec: side.operator,
        seed: side.seed,
        slices: data.chunks(per).map(<[f64]>::to_vec).collect(),
    })
}

/// Writes a stack of square slices as `[N, H, W]` float32.
pub fn write_volume(path: &Path, slices: &[Vec<f64>]) -> Result<()> {
    let len = slices.first().map_or(0, Vec::len);
    let size = (len as f64).sqrt().round() as usize;
    if size * size != len || slices.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("volume slices must be equal-size squares"));
    }
    write_f32(path, slices.iter().flatten().copied())?;
    write_toml(
        &sidecar_path(path),
        &VolumeSidecar {
            shape: vec![slices.len(), size, size],
            dtype: Dtype::Float32,
        },
    )
}

pub fn read_volume(path: &Path) -> Result<Vec<Vec<f64>>> {
    let side: VolumeSidecar = read_toml(&sidecar_path(path))?;
    let (n, h, w) = match side.shape.as_slice() {
        &[n, h, w] if side.dtype == Dtype::Float32 => (n, h, w),
        _ => return Err(Error::Format(format!("bad volume shape {:?}", side.shape))),
    };
    let data = read_f32(path, n * h * w)?;
    Ok(data.chunks(h * w).map(<[f64]>::to_vec).collect())
}
