//! Procedural images: random ellipse phantoms for training and
//! piecewise-constant or smooth volumes with drifting shapes as
//! out-of-distribution targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of ellipse phantoms. Geometry is in normalized coordinates
/// where the image spans `[-1, 1]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipseSpec {
    pub image_size: usize,
    pub count_min: usize,
    pub count_max: usize,
    /// Centres are uniform in `[-center_range, center_range]²`.
    pub center_range: f64,
    pub axis_min: f64,
    pub axis_max: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub background: f64,
}

impl Default for EllipseSpec {
    fn default() -> Self {
        EllipseSpec {
            image_size: 32,
            count_min: 2,
            count_max: 6,
            center_range: 0.5,
            axis_min: 0.1,
            axis_max: 0.5,
            intensity_min: 0.1,
            intensity_max: 0.4,
            background: 0.0,
        }
    }
}

impl EllipseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.count_min > self.count_max {
            return Err(Error::config("ellipse spec needs image_size > 0 and count_min ≤ count_max"));
        }
        if !(0.0 < self.axis_min && self.axis_min <= self.axis_max) {
            return Err(Error::config("ellipse axes must be positive"));
        }
        if self.intensity_min > self.intensity_max || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::config("invalid ellipse intensity range"));
        }
        Ok(())
    }
}

fn coord(i: usize, size: usize) -> f64 {
    (2 * i + 1) as f64 / size as f64 - 1.0
}

/// One phantom; overlapping ellipses add, then values are clamped to `[0, 1]`.
pub fn sample_ellipse_image(spec: &EllipseSpec, seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ellipse_image(spec, &mut rng))
}

/// Draws a phantom from an existing random stream.
pub fn ellipse_image(spec: &EllipseSpec, rng: &mut impl Rng) -> Vec<f64> {
    let s = spec.image_size;
    let mut img = vec![spec.background; s * s];
    let count = rng.random_range(spec.count_min..=spec.count_max);
    for _ in 0..count {
        let cx = rng.random_range(-spec.center_range..=spec.center_range);
        let cy = rng.random_range(-spec.center_range..=spec.center_range);
        let a = rng.random_range(spec.axis_min..=spec.axis_max);
        let b = rng.random_range(spec.axis_min..=spec.axis_max);
        let phi = rng.random_range(0.0..std::f64::consts::PI);
        let v = rng.random_range(spec.intensity_min..=spec.intensity_max);
        let (sn, cs) = phi.sin_cos();
        for r in 0..s {
            let py = coord(r, s) - cy;
            for c in 0..s {
                let px = coord(c, s) - cx;
                let u = (px * cs + py * sn) / a;
                let w = (-px * sn + py * cs) / b;
                if u * u + w * w <= 1.0 {
                    img[r * s + c] += v;
                }
            }
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    Rectangles,
    DisksBars,
    SmoothBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodVolumeSpec {
    pub kind: OodKind,
    pub image_size: usize,
    pub slices: usize,
    /// Slice-to-slice parameter persistence in `[0, 1]`: 0 draws every
    /// slice independently, 1 repeats the first slice.
    pub correlation: f64,
    pub shapes: usize,
}

impl Default for OodVolumeSpec {
    fn default() -> Self {
        OodVolumeSpec {
            kind: OodKind::Rectangles,
            image_size: 32,
            slices: 16,
            correlation: 0.8,
            shapes: 6,
        }
    }
}

/// Per-shape parameters, all in `[0, 1]` so slices can be mixed convexly.
const SHAPE_PARAMS: usize = 6;

fn draw_params(spec: &OodVolumeSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..spec.shapes * SHAPE_PARAMS).map(|_| rng.random::<f64>()).collect()
}

fn lerp(lo: f64, hi: f64, t: f64) -> f64 {
    lo + (hi - lo) * t
}

fn render(spec: &OodVolumeSpec, params: &[f64]) -> Vec<f64> {
    let s = spec.image_size;
    let mut img = vec![0.0; s * s];
    for (k, p) in params.chunks(SHAPE_PARAMS).enumerate() {
        let cx = lerp(-0.6, 0.6, p[0]);
        let cy = lerp(-0.6, 0.6, p[1]);
        let value = lerp(0.2, 0.9, p[4]);
        // the first shape is a large body, the rest alternate blocks and bars
        let (hw, hh) = if k == 0 {
            (lerp(0.5, 0.8, p[2]), lerp(0.5, 0.8, p[3]))
        } else if k % 2 == 1 || spec.kind == OodKind::SmoothBlobs {
            (lerp(0.1, 0.35, p[2]), lerp(0.1, 0.35, p[3]))
        } else if p[5] < 0.5 {
            (lerp(0.3, 0.6, p[2]), lerp(0.03, 0.08, p[3]))
        } else {
            (lerp(0.03, 0.08, p[2]), lerp(0.3, 0.6, p[3]))
        };
        let (cx, cy) = if k == 0 { (cx * 0.2, cy * 0.2) } else { (cx, cy) };
        for r in 0..s {
            let dy = coord(r, s) - cy;
            for c in 0..s {
                let dx = coord(c, s) - cx;
                let i = r * s + c;
                match spec.kind {
                    OodKind::Rectangles => {
                        if dx.abs() <= hw && dy.abs() <= hh {
                            img[i] = value;
                        }
                    }
                    OodKind::DisksBars => {
                        let inside = if k % 2 == 1 || k == 0 {
                            (dx / hw).powi(2) + (dy / hw).powi(2) <= 1.0
                        } else {
                            dx.abs() <= hw && dy.abs() <= hh
                        };
                        if inside {
                            img[i] = value;
                        }
                    }
                    OodKind::SmoothBlobs => {
                        let e = (-(dx * dx / (2.0 * hw * hw) + dy * dy / (2.0 * hh * hh))).exp();
                        img[i] += 0.6 * value * e;
                    }
                }
            }
        }
    }
    for p in img.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    img
}

/// Volume whose shape parameters follow `P_i = c · P_{i−1} + (1 − c) · D_i`
/// with fresh uniform draws `D_i`, so shapes drift smoothly along the
/// slice axis.
pub fn sample_ood_volume(spec: &OodVolumeSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    if spec.slices < 2 || spec.image_size == 0 || spec.shapes == 0 {
        return Err(Error::config("OOD volume needs ≥ 2 slices, a positive size and ≥ 1 shape"));
    }
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(Error::config("correlation must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = spec.correlation;
    let mut params = draw_params(spec, &mut rng);
    let mut volume = vec![render(spec, &params)];
    for _ in 1..spec.slices {
        let fresh = draw_params(spec, &mut rng);
        for (p, d) in params.iter_mut().zip(&fresh) {
            *p = c * *p + (1.0 - c) * d;
        }
        volume.push(render(spec, &params));
    }
    Ok(volume)
}

const HIST_BINS: usize = 16;
const ORIENT_BINS: usize = 8;

/// Intensity histogram followed by a gradient-magnitude-weighted
/// orientation histogram, each normalized to unit mass.
fn features(img: &[f64]) -> Vec<f64> {
    let s = (img.len() as f64).sqrt() as usize;
    let mut f = vec![0.0; HIST_BINS + ORIENT_BINS];
    for &v in img {
        let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        f[b] += 1.0 / img.len() as f64;
    }
    let mut total = 0.0;
    for r in 0..s.saturating_sub(1) {
        for c in 0..s.saturating_sub(1) {
            let gx = img[r * s + c + 1] - img[r * s + c];
            let gy = img[(r + 1) * s + c] - img[r * s + c];
            let mag = gx.hypot(gy);
            if mag > 1e-9 {
                // orientation modulo π
                let ang = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let b = ((ang / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
                f[HIST_BINS + b] += mag;
                total += mag;
            }
        }
    }
    if total > 0.0 {
        for v in &mut f[HIST_BINS..] {
            *v /= total;
        }
    }
    f
}

/// L1 distance between the mean feature vectors of two image samples.
pub fn shape_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("shape_distance needs non-empty samples"));
    }
    let mean = |set: &[Vec<f64>]| {
        let mut m = vec![0.0; HIST_BINS + ORIENT_BINS];
        for img in set {
            for (acc, v) in m.iter_mut().zip(features(img)) {
                *acc += v / set.len() as f64;
            }
        }
        m
    };
    let (ma, mb) = (mean(a), mean(b));
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum())
}
