use crate::error::{Error, Result};

/// Reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;

fn same_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    same_len(x, reference, "psnr")?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be positive"));
    }
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    w
}

/// Mean SSIM of two square images with data range 1, using an 11×11
/// Gaussian window (σ = 1.5). Near the border the window is cropped to the
/// image and renormalized, so small images are handled without padding.
pub fn ssim(x: &[f64], reference: &[f64]) -> Result<f64> {
    same_len(x, reference, "ssim")?;
    let s = (x.len() as f64).sqrt().round() as usize;
    if s * s != x.len() {
        return Err(Error::invalid("ssim expects square images"));
    }
    let g = gaussian_window();
    let half = (WINDOW / 2) as isize;
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for r in 0..s as isize {
        for c in 0..s as isize {
            let (mut wsum, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dr in -half..=half {
                let rr = r + dr;
                if rr < 0 || rr >= s as isize {
                    continue;
                }
                for dc in -half..=half {
                    let cc = c + dc;
                    if cc < 0 || cc >= s as isize {
                        continue;
                    }
                    let w = g[(dr + half) as usize] * g[(dc + half) as usize];
                    let i = rr as usize * s + cc as usize;
                    let (a, b) = (x[i], reference[i]);
                    wsum += w;
                    mx += w * a;
                    my += w * b;
                    xx += w * a * a;
                    yy += w * b * b;
                    xy += w * a * b;
                }
            }
            let (mx, my) = (mx / wsum, my / wsum);
            let vx = xx / wsum - mx * mx;
            let vy = yy / wsum - my * my;
            let cov = xy / wsum - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (s * s) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_edge_cases() {
        let a = vec![0.2, 0.4, 0.6];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!(psnr(&b, &a, 1.0).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &b[..2], 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a: Vec<f64> = (0..64).map(|i| ((i * 7) % 10) as f64 / 10.0).collect();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&inv, &a).unwrap() < 1.0);
    }
}
