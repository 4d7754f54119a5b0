//! Parallel-beam CT projector.
//!
//! Each ray is marched in half-pixel steps and the image is sampled with
//! bilinear interpolation; the accumulated interpolation weights form a
//! sparse system matrix whose transpose is the back-projector, so the
//! adjoint is exact by construction.

use super::LinearMap;

#[derive(Debug, Clone)]
pub struct ParallelBeam {
    size: usize,
    detectors: usize,
    angles: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

const STEP: f64 = 0.5;

impl ParallelBeam {
    /// Projector for a `size × size` image, pixel spacing 1, detector spacing 1.
    pub fn new(size: usize, angles_deg: &[f64], detectors: usize) -> Self {
        let n = size as f64;
        let centre = (n - 1.0) / 2.0;
        let det_centre = (detectors as f64 - 1.0) / 2.0;
        let reach = n / std::f64::consts::SQRT_2 + 1.0;
        let steps = (2.0 * reach / STEP).ceil() as usize + 1;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut scratch = vec![0.0; size * size];
        let mut touched: Vec<usize> = Vec::new();
        for &deg in angles_deg {
            let (s, c) = deg.to_radians().sin_cos();
            for d in 0..detectors {
                let offset = d as f64 - det_centre;
                for k in 0..steps {
                    let u = -reach + k as f64 * STEP;
                    // x grows with the column index, y with the row index
                    let px = offset * c - u * s + centre;
                    let py = offset * s + u * c + centre;
                    let (fx, fy) = (px.floor(), py.floor());
                    let (ax, ay) = (px - fx, py - fy);
                    for (dy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
                        for (dx, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                            let (xi, yi) = (fx + dx, fy + dy);
                            let w = wx * wy * STEP;
                            if w == 0.0 || xi < 0.0 || yi < 0.0 || xi >= n || yi >= n {
                                continue;
                            }
                            let idx = yi as usize * size + xi as usize;
                            if scratch[idx] == 0.0 {
                                touched.push(idx);
                            }
                            scratch[idx] += w;
                        }
                    }
                }
                touched.sort_unstable();
                for &idx in &touched {
                    cols.push(idx as u32);
                    vals.push(scratch[idx]);
                    scratch[idx] = 0.0;
                }
                touched.clear();
                row_ptr.push(cols.len());
            }
        }
        ParallelBeam {
            size,
            detectors,
            angles: angles_deg.len(),
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn detectors(&self) -> usize {
        self.detectors
    }

    pub fn angles(&self) -> usize {
        self.angles
    }
}

impl LinearMap for ParallelBeam {
    fn domain_len(&self) -> usize {
        self.size * self.size
    }

    fn range_len(&self) -> usize {
        self.angles * self.detectors
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            *out = self.cols[lo..hi]
                .iter()
                .zip(&self.vals[lo..hi])
                .map(|(&c, &v)| v * x[c as usize])
                .sum();
        }
    }

    fn adjoint(&self, y: &[f64], x: &mut [f64]) {
        x.fill(0.0);
        for (r, &yr) in y.iter().enumerate() {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for (&c, &v) in self.cols[lo..hi].iter().zip(&self.vals[lo..hi]) {
                x[c as usize] += v * yr;
            }
        }
    }
}

/// `count` angles evenly covering `[0°, 180°)`.
pub fn uniform_angles(count: usize) -> Vec<f64> {
    (0..count).map(|i| 180.0 * i as f64 / count as f64).collect()
}
