//! Cartesian MRI forward models on real-valued images.
//!
//! The 2D DFT is unitary (scaled by `1/n` for an `n × n` grid), so a fully
//! sampled single-coil acquisition preserves the Euclidean norm. Sampled
//! k-space values are stored as interleaved `(re, im)` pairs in mask order,
//! coil-major for multi-coil data. The image domain is real, hence the
//! adjoint keeps the real part of the zero-filled inverse transform.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::LinearMap;

#[derive(Clone)]
pub struct CartesianMri {
    size: usize,
    sampled: Vec<usize>,
    coils: Vec<Vec<Complex64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CartesianMri {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CartesianMri")
            .field("size", &self.size)
            .field("sampled", &self.sampled.len())
            .field("coils", &self.coils.len())
            .finish()
    }
}

impl CartesianMri {
    /// `mask` is row-major `size × size`; `coils` empty means single-coil.
    pub fn new(size: usize, mask: &[bool], coils: Vec<Vec<Complex64>>) -> Self {
        let mut planner = FftPlanner::new();
        CartesianMri {
            size,
            sampled: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
            coils,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    fn n_coils(&self) -> usize {
        self.coils.len().max(1)
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.size;
        let plan = if inverse { &self.inverse } else { &self.forward };
        for row in buf.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

impl LinearMap for CartesianMri {
    fn domain_len(&self) -> usize {
        self.size * self.size
    }

    fn range_len(&self) -> usize {
        2 * self.sampled.len() * self.n_coils()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let per_coil = 2 * self.sampled.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); x.len()];
        for c in 0..self.n_coils() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = match self.coils.get(c) {
                    Some(map) => map[i] * x[i],
                    None => Complex64::new(x[i], 0.0),
                };
            }
            self.fft2(&mut buf, false);
            let out = &mut y[c * per_coil..(c + 1) * per_coil];
            for (k, &idx) in self.sampled.iter().enumerate() {
                out[2 * k] = buf[idx].re;
                out[2 * k + 1] = buf[idx].im;
            }
        }
    }

    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        let per_coil = 2 * self.sampled.len();
        x.fill(0.0);
        let mut buf = vec![Complex64::new(0.0, 0.0); x.len()];
        for c in 0..self.n_coils() {
            buf.fill(Complex64::new(0.0, 0.0));
            let src = &y[c * per_coil..(c + 1) * per_coil];
            for (k, &idx) in self.sampled.iter().enumerate() {
                buf[idx] = Complex64::new(src[2 * k], src[2 * k + 1]);
            }
            self.fft2(&mut buf, true);
            for (i, v) in x.iter_mut().enumerate() {
                *v += match self.coils.get(c) {
                    Some(map) => (map[i].conj() * buf[i]).re,
                    None => buf[i].re,
                };
            }
        }
    }
}

/// Index of the zero frequency along one k-space axis of length `n`
/// (unshifted layout: DC at 0, negative frequencies wrap to the end).
fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Variable-density Bernoulli mask: a fully sampled disc of radius
/// `center_fraction · n / 2` around DC, elsewhere a radially decaying
/// probability scaled so the expected sampling ratio is `1 / acceleration`.
pub fn variable_density_mask(size: usize, acceleration: f64, center_fraction: f64, seed: u64) -> Vec<bool> {
    let n = size as f64;
    let centre_r = center_fraction * n / 2.0;
    let radius: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            (freq(r, size).powi(2) + freq(c, size).powi(2)).sqrt() / (n / 2.0)
        })
        .collect();
    let target = (size * size) as f64 / acceleration;
    let in_centre = radius.iter().filter(|&&r| r * n / 2.0 <= centre_r).count() as f64;
    let weight = |r: f64| (1.0 - r.min(1.0)).powi(2) + 0.02;
    let outer_weight: f64 = radius
        .iter()
        .filter(|&&r| r * n / 2.0 > centre_r)
        .map(|&r| weight(r))
        .sum();
    let scale = ((target - in_centre).max(0.0) / outer_weight.max(1e-12)).min(1e6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    radius
        .iter()
        .map(|&r| {
            let u: f64 = rng.random();
            r * n / 2.0 <= centre_r || u < (scale * weight(r)).min(1.0)
        })
        .collect()
}

/// 1D uniform undersampling of phase-encode columns: every
/// `acceleration`-th column plus a fully sampled low-frequency band holding
/// `acs_fraction` of the columns.
pub fn uniform_1d_mask(size: usize, acceleration: usize, acs_fraction: f64) -> Vec<bool> {
    let acs = ((acs_fraction * size as f64).round() as usize).max(1);
    let half = acs as f64 / 2.0;
    let keep: Vec<bool> = (0..size)
        .map(|c| c % acceleration.max(1) == 0 || freq(c, size).abs() < half)
        .collect();
    (0..size * size).map(|i| keep[i % size]).collect()
}

/// Smooth complex coil sensitivities: Gaussians centred around the image
/// border with linear phase ramps, normalised so `Σ_c |s_c|² = 1` per pixel.
pub fn synthetic_coil_maps(size: usize, coils: usize) -> Vec<Vec<Complex64>> {
    let n = size as f64;
    let mut maps: Vec<Vec<Complex64>> = (0..coils)
        .map(|c| {
            let phi = 2.0 * std::f64::consts::PI * c as f64 / coils as f64;
            let (cy, cx) = (0.5 + 0.45 * phi.sin(), 0.5 + 0.45 * phi.cos());
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64 / n, (i % size) as f64 / n);
                    let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                    let mag = (-d2 / (2.0 * 0.35f64.powi(2))).exp();
                    let phase = phi + 1.5 * (x - 0.5) - 0.8 * (y - 0.5);
                    Complex64::from_polar(mag, phase)
                })
                .collect()
        })
        .collect();
    for i in 0..size * size {
        let norm = maps.iter().map(|m| m[i].norm_sqr()).sum::<f64>().sqrt();
        for m in maps.iter_mut() {
            m[i] /= norm;
        }
    }
    maps
}
