#![allow(dead_code)]

use ddip_core::denoiser::{build_denoiser, DenoiserConfig, DenoiserParams};
use ddip_core::operators::{OperatorKind, OperatorSpec};
use ddip_core::phantoms::{sample_ood_volume, OodVolumeSpec};
use ddip_core::schedule::{make_vp_schedule, NoiseSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIZE: usize = 16;

/// A 16×16 network small enough for many end-to-end runs per test.
pub fn tiny_net(seed: u64) -> DenoiserParams {
    let config = DenoiserConfig {
        image_size: SIZE,
        base_channels: 4,
        time_embed_dim: 16,
        ..DenoiserConfig::default()
    };
    build_denoiser(&config, seed).unwrap()
}

pub fn short_schedule(nfe: usize, eta: f64) -> NoiseSchedule {
    make_vp_schedule(1000, 1e-4, 2e-2, nfe, eta, 980).unwrap()
}

pub fn ct(views: usize, sigma: f64) -> OperatorSpec {
    OperatorSpec::sparse_view_ct(SIZE, views, sigma)
}

pub fn volume(slices: usize, seed: u64) -> Vec<Vec<f64>> {
    let spec = OodVolumeSpec {
        image_size: SIZE,
        slices: slices.max(2),
        ..OodVolumeSpec::default()
    };
    let mut v = sample_ood_volume(&spec, seed).unwrap();
    v.truncate(slices);
    v
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    ddip_core::schedule::standard_normal(rng, n)
}

pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `Q diag(λ) Qᵀ` with log-uniform eigenvalues in `[1, cond]`.
pub fn spd(n: usize, cond: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let lambda: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 1.0 } else { cond.powf(i as f64 / (n - 1) as f64) })
        .collect();
    let mut a = vec![0.0; n * n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] += lambda[k] * q[k][i] * q[k][j];
            }
        }
    }
    (a, lambda)
}

/// Dense operator on 4×4 images whose `rows` rows are orthonormal.
pub fn orthonormal_rows(rows: usize, seed: u64) -> OperatorSpec {
    let n = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < rows {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let d = dot(&v, u);
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    OperatorSpec {
        image_size: 4,
        kind: OperatorKind::Dense {
            rows,
            data: q.concat(),
        },
        sigma_y: 0.0,
    }
}

/// Dense solve of an SPD system by Cholesky factorization.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = if i == j { (a[i * n + i] - s).sqrt() } else { (a[i * n + j] - s) / l[j * n + j] };
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (b[i] - (0..i).map(|k| l[i * n + k] * z[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (z[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    x
}
