//! Linear forward models, their adjoints, and the solvers built on them.

mod cg;
pub mod ct;
pub mod io;
pub mod mri;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cg::{cg_solve, cg_unrolled, CgOutcome};

/// A real linear map `R^domain_len → R^range_len` with its adjoint.
pub trait LinearMap: Send + Sync + std::fmt::Debug {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    /// `y ← A x`; `y` has length `range_len`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x ← Aᵀ y`; `x` has length `domain_len`.
    fn adjoint(&self, y: &[f64], x: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct IdentityMap(pub usize);

impl LinearMap for IdentityMap {
    fn domain_len(&self) -> usize {
        self.0
    }
    fn range_len(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.copy_from_slice(x);
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.copy_from_slice(y);
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone)]
pub struct DenseMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "dense_map",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(DenseMap { rows, cols, data })
    }
}

impl LinearMap for DenseMap {
    fn domain_len(&self) -> usize {
        self.cols
    }
    fn range_len(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.data[r * self.cols..(r + 1) * self.cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            for (xi, a) in x.iter_mut().zip(&self.data[r * self.cols..(r + 1) * self.cols]) {
                *xi += a * yr;
            }
        }
    }
}

/// Forward differences between consecutive slices of a stacked volume:
/// `(T x)_k = x_{k+1} − x_k` for `k < slices − 1`.
#[derive(Debug, Clone)]
pub struct SliceDifference {
    pub slices: usize,
    pub slice_len: usize,
}

impl LinearMap for SliceDifference {
    fn domain_len(&self) -> usize {
        self.slices * self.slice_len
    }
    fn range_len(&self) -> usize {
        self.slices.saturating_sub(1) * self.slice_len
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.slice_len;
        for k in 0..self.slices.saturating_sub(1) {
            for j in 0..n {
                y[k * n + j] = x[(k + 1) * n + j] - x[k * n + j];
            }
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let n = self.slice_len;
        x.fill(0.0);
        for k in 0..self.slices.saturating_sub(1) {
            for j in 0..n {
                x[(k + 1) * n + j] += y[k * n + j];
                x[k * n + j] -= y[k * n + j];
            }
        }
    }
}

/// In-plane forward differences with a zero difference past the last row
/// and column. Output layout: all horizontal differences, then all vertical.
#[derive(Debug, Clone)]
pub struct Gradient2d {
    pub size: usize,
}

impl LinearMap for Gradient2d {
    fn domain_len(&self) -> usize {
        self.size * self.size
    }
    fn range_len(&self) -> usize {
        2 * self.size * self.size
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let s = self.size;
        let (dx, dy) = y.split_at_mut(s * s);
        for r in 0..s {
            for c in 0..s {
                let i = r * s + c;
                dx[i] = if c + 1 < s { x[i + 1] - x[i] } else { 0.0 };
                dy[i] = if r + 1 < s { x[i + s] - x[i] } else { 0.0 };
            }
        }
    }
    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let s = self.size;
        let (dx, dy) = y.split_at(s * s);
        x.fill(0.0);
        for r in 0..s {
            for c in 0..s {
                let i = r * s + c;
                if c + 1 < s {
                    x[i + 1] += dx[i];
                    x[i] -= dx[i];
                }
                if r + 1 < s {
                    x[i + s] += dy[i];
                    x[i] -= dy[i];
                }
            }
        }
    }
}

/// Which forward model a measurement was taken with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    CtParallel {
        angles_deg: Vec<f64>,
        detectors: usize,
    },
    MriSingle {
        mask: Vec<bool>,
    },
    MriMulticoil {
        mask: Vec<bool>,
        coils: usize,
    },
    Dense {
        rows: usize,
        data: Vec<f64>,
    },
}

/// Serializable description of a forward model plus its noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub image_size: usize,
    #[serde(flatten)]
    pub kind: OperatorKind,
    pub sigma_y: f64,
}

impl OperatorSpec {
    pub fn identity(image_size: usize, sigma_y: f64) -> Self {
        OperatorSpec {
            image_size,
            kind: OperatorKind::Identity,
            sigma_y,
        }
    }

    /// Sparse-view CT with `views` angles evenly spread over 180°.
    pub fn sparse_view_ct(image_size: usize, views: usize, sigma_y: f64) -> Self {
        OperatorSpec {
            image_size,
            kind: OperatorKind::CtParallel {
                angles_deg: ct::uniform_angles(views),
                detectors: image_size + image_size / 2,
            },
            sigma_y,
        }
    }

    /// Limited-angle CT: `views` angles evenly spread over `[0, arc_deg)`.
    pub fn limited_angle_ct(image_size: usize, views: usize, arc_deg: f64, sigma_y: f64) -> Self {
        OperatorSpec {
            image_size,
            kind: OperatorKind::CtParallel {
                angles_deg: (0..views).map(|i| arc_deg * i as f64 / views as f64).collect(),
                detectors: image_size + image_size / 2,
            },
            sigma_y,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self.kind {
            OperatorKind::Identity => "identity",
            OperatorKind::CtParallel { .. } => "ct_parallel",
            OperatorKind::MriSingle { .. } => "mri_single",
            OperatorKind::MriMulticoil { .. } => "mri_multicoil",
            OperatorKind::Dense { .. } => "dense",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_size * self.image_size;
        if self.image_size == 0 {
            return Err(Error::config("operator image_size must be positive"));
        }
        if !(self.sigma_y >= 0.0) || !self.sigma_y.is_finite() {
            return Err(Error::config("sigma_y must be finite and non-negative"));
        }
        match &self.kind {
            OperatorKind::Identity => {}
            OperatorKind::CtParallel {
                angles_deg,
                detectors,
            } => {
                if angles_deg.is_empty() || *detectors == 0 {
                    return Err(Error::config("CT needs at least one angle and detector"));
                }
                if angles_deg.iter().any(|a| !a.is_finite()) {
                    return Err(Error::config("CT angles must be finite"));
                }
            }
            OperatorKind::MriSingle { mask } | OperatorKind::MriMulticoil { mask, .. } => {
                if mask.len() != n {
                    return Err(Error::config(format!(
                        "MRI mask has {} entries, expected {n}",
                        mask.len()
                    )));
                }
                if !mask.iter().any(|&m| m) {
                    return Err(Error::config("MRI mask samples nothing"));
                }
                if let OperatorKind::MriMulticoil { coils, .. } = self.kind {
                    if coils == 0 {
                        return Err(Error::config("multi-coil MRI needs at least one coil"));
                    }
                }
            }
            OperatorKind::Dense { rows, data } => {
                if *rows == 0 || data.len() != rows * n {
                    return Err(Error::config("dense operator has inconsistent size"));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Operator> {
        self.validate()?;
        let size = self.image_size;
        let map: Arc<dyn LinearMap> = match &self.kind {
            OperatorKind::Identity => Arc::new(IdentityMap(size * size)),
            OperatorKind::CtParallel {
                angles_deg,
                detectors,
            } => Arc::new(ct::ParallelBeam::new(size, angles_deg, *detectors)),
            OperatorKind::MriSingle { mask } => Arc::new(mri::CartesianMri::new(size, mask, Vec::new())),
            OperatorKind::MriMulticoil { mask, coils } => Arc::new(mri::CartesianMri::new(
                size,
                mask,
                mri::synthetic_coil_maps(size, *coils),
            )),
            OperatorKind::Dense { rows, data } => Arc::new(DenseMap::new(*rows, size * size, data.clone())?),
        };
        Ok(Operator {
            spec: self.clone(),
            map,
        })
    }

    /// SHA-256 of the canonical JSON encoding; identifies the operator in
    /// measurement sidecars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("operator spec serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A built forward model, cheap to clone.
#[derive(Debug, Clone)]
pub struct Operator {
    spec: OperatorSpec,
    map: Arc<dyn LinearMap>,
}

impl Operator {
    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn map(&self) -> &Arc<dyn LinearMap> {
        &self.map
    }

    pub fn image_len(&self) -> usize {
        self.map.domain_len()
    }

    pub fn measurement_len(&self) -> usize {
        self.map.range_len()
    }

    pub fn sigma_y(&self) -> f64 {
        self.spec.sigma_y
    }

    fn check(&self, op: &'static str, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![got],
                rhs: vec![want],
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("apply", x.len(), self.image_len())?;
        let mut y = vec![0.0; self.measurement_len()];
        self.map.apply(x, &mut y);
        Ok(y)
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check("adjoint", y.len(), self.measurement_len())?;
        let mut x = vec![0.0; self.image_len()];
        self.map.adjoint(y, &mut x);
        Ok(x)
    }

    /// `AᵀA x + damping · x`.
    pub fn normal(&self, x: &[f64], damping: f64, out: &mut [f64]) {
        let mut y = vec![0.0; self.measurement_len()];
        self.map.apply(x, &mut y);
        self.map.adjoint(&y, out);
        for (o, v) in out.iter_mut().zip(x) {
            *o += damping * v;
        }
    }

    /// Minimum-norm least-squares solution `A†y` approximated by `iters`
    /// CG steps on the normal equations from zero.
    pub fn pseudo_inverse(&self, y: &[f64], iters: usize) -> Result<Vec<f64>> {
        let rhs = self.adjoint(y)?;
        let out = cg_solve(|v, o| self.normal(v, 0.0, o), &rhs, iters, 0.0, None)?;
        Ok(out.x)
    }

    /// `y = A x + σ_y · n` with `n` standard normal from `seed`.
    pub fn simulate(&self, x: &[f64], seed: u64) -> Result<Vec<f64>> {
        let mut y = self.apply(x)?;
        let sigma = self.spec.sigma_y;
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in y.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * n;
            }
        }
        Ok(y)
    }
}

/// Simulates one measurement per slice, each with its own noise stream.
pub fn simulate_volume(op: &Operator, slices: &[Vec<f64>], seed: u64) -> Result<Vec<Vec<f64>>> {
    slices
        .iter()
        .enumerate()
        .map(|(i, s)| op.simulate(s, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)))
        .collect()
}
