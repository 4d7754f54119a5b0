//! Raw numeric kernels behind the differentiable ops. All layouts are
//! row-major; image tensors are `[batch, channels, height, width]`.

/// Range of output coordinates `i` for which `i + offset` lies in `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).min(len as isize).max(0) as usize;
    (lo.min(hi), hi)
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unfolds one `[ci, h, w]` image into `[ci·k·k, h·w]` patch rows.
fn im2col(x: &[f64], ci: usize, h: usize, wd: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    cols.fill(0.0);
    for c in 0..ci {
        let in_plane = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(wd, dx);
                let row = &mut cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x0 as isize + dx) as usize;
                    row[y * wd + x0..y * wd + x1].copy_from_slice(&in_plane[sy * wd + sx..sy * wd + sx + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image.
fn col2im(cols: &[f64], ci: usize, h: usize, wd: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let plane = h * wd;
    for c in 0..ci {
        let out_plane = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(wd, dx);
                let row = &cols[((c * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx = (x0 as isize + dx) as usize;
                    for (d, s) in out_plane[sy * wd + sx..sy * wd + sx + (x1 - x0)]
                        .iter_mut()
                        .zip(&row[y * wd + x0..y * wd + x1])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`, four output rows at a time so each
/// row of `b` is streamed once per block.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Same-size convolution (cross-correlation), stride 1, zero padding `k / 2`.
pub fn conv2d_forward(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4]) -> Vec<f64> {
    let [b, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let plane = h * wd;
    let patch = ci * k * k;
    let mut out = vec![0.0; b * co * plane];
    let mut cols = vec![0.0; patch * plane];
    for bi in 0..b {
        let xin = &x[bi * ci * plane..(bi + 1) * ci * plane];
        let dst = &mut out[bi * co * plane..(bi + 1) * co * plane];
        if k == 1 {
            gemm_acc(w, xin, dst, co, ci, plane);
        } else {
            im2col(xin, ci, h, wd, k, &mut cols);
            gemm_acc(w, &cols, dst, co, patch, plane);
        }
    }
    out
}

/// Gradients of `conv2d_forward` with respect to the input and the kernel.
pub fn conv2d_backward(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let [b, ci, h, wd] = xs;
    let [co, _, k, _] = ws;
    let plane = h * wd;
    let patch = ci * k * k;
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    // kernel transposed to [patch, co] for the input gradient
    let wt: Vec<f64> = if need_x {
        (0..patch * co).map(|i| w[(i % co) * patch + i / co]).collect()
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; patch * plane];
    let mut gcols = vec![0.0; if need_x { patch * plane } else { 0 }];
    for bi in 0..b {
        let xin = &x[bi * ci * plane..(bi + 1) * ci * plane];
        let g = &gout[bi * co * plane..(bi + 1) * co * plane];
        let cols_ref: &[f64] = if k == 1 {
            xin
        } else {
            im2col(xin, ci, h, wd, k, &mut cols);
            &cols
        };
        if need_w {
            for o in 0..co {
                let grow = &g[o * plane..(o + 1) * plane];
                for p in 0..patch {
                    gw[o * patch + p] += dot4(grow, &cols_ref[p * plane..(p + 1) * plane]);
                }
            }
        }
        if need_x {
            let dst = &mut gx[bi * ci * plane..(bi + 1) * ci * plane];
            if k == 1 {
                gemm_acc(&wt, g, dst, patch, co, plane);
            } else {
                gcols.fill(0.0);
                gemm_acc(&wt, g, &mut gcols, patch, co, plane);
                col2im(&gcols, ci, h, wd, k, dst);
            }
        }
    }
    (gx, gw)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            axpy(&mut out[i * n..(i + 1) * n], a[p * m + i], &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
    out
}

pub fn upsample2x(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of `upsample2x`: sums each 2×2 block. `xs` is the *input* shape.
pub fn upsample2x_backward(g: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let w2 = 2 * w;
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &g[p * 4 * h * w..][..4 * h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..2 * h {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    out
}

pub fn avgpool2x(x: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * h2 * w2];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * w + 2 * xx;
                dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

/// `xs` is the *input* shape of the pooling.
pub fn avgpool2x_backward(g: &[f64], xs: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        let src = &g[p * h2 * w2..][..h2 * w2];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * w2 + xx / 2];
            }
        }
    }
    out
}

/// Group normalization statistics and output. Returns `(y, xhat, rstd)` with
/// `rstd` per `(batch, group)`.
pub fn group_norm_forward(
    x: &[f64],
    xs: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = xs;
    let cpg = c / groups;
    let span = cpg * h * w;
    let plane = h * w;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; b * groups];
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cpg) * plane;
            let seg = &x[off..off + span];
            let mean = seg.iter().sum::<f64>() / span as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / span as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[bi * groups + g] = r;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                for i in 0..plane {
                    let idx = off + cc * plane + i;
                    let xh = (x[idx] - mean) * r;
                    xhat[idx] = xh;
                    y[idx] = xh * gamma[ch] + beta[ch];
                }
            }
        }
    }
    (y, xhat, rstd)
}

pub fn group_norm_backward(
    gy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    xs: [usize; 4],
    gamma: &[f64],
    groups: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = xs;
    let cpg = c / groups;
    let plane = h * w;
    let span = (cpg * plane) as f64;
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cpg) * plane;
            let r = rstd[bi * groups + g];
            let mut mean_d = 0.0;
            let mut mean_dx = 0.0;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                for i in 0..plane {
                    let idx = off + cc * plane + i;
                    ggamma[ch] += gy[idx] * xhat[idx];
                    gbeta[ch] += gy[idx];
                    let d = gy[idx] * gamma[ch];
                    mean_d += d;
                    mean_dx += d * xhat[idx];
                }
            }
            mean_d /= span;
            mean_dx /= span;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                for i in 0..plane {
                    let idx = off + cc * plane + i;
                    let d = gy[idx] * gamma[ch];
                    gx[idx] = r * (d - mean_d - xhat[idx] * mean_dx);
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Strides of `src` aligned against `dst` under right-aligned broadcasting;
/// broadcast dimensions get stride 0.
fn broadcast_strides(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let lead = dst.len() - src.len();
    let mut strides = vec![0; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[lead + i] = acc;
        }
        acc *= src[i];
    }
    strides
}

/// Visits every flat index of `dst` paired with its broadcast source index.
fn for_each_broadcast(src: &[usize], dst: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(src, dst);
    let n: usize = dst.iter().product();
    let mut counter = vec![0usize; dst.len()];
    let mut s = 0usize;
    for d in 0..n {
        f(d, s);
        for ax in (0..dst.len()).rev() {
            counter[ax] += 1;
            s += strides[ax];
            if counter[ax] < dst[ax] {
                break;
            }
            s -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

pub fn broadcast_compatible(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let lead = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == dst[lead + i])
}

pub fn broadcast_to(x: &[f64], src: &[usize], dst: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; dst.iter().product()];
    for_each_broadcast(src, dst, |d, s| out[d] = x[s]);
    out
}

pub fn broadcast_reduce(g: &[f64], src: &[usize], dst: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; src.iter().product::<usize>().max(1)];
    for_each_broadcast(src, dst, |d, s| out[s] += g[d]);
    out
}
