use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where one-sided differences disagree (kinks such as
    /// `|x|` at zero); they do not contribute to `max_rel_error`.
    pub excluded: Vec<usize>,
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let x = g.constant(point.clone());
    let y = f(&g, x)?;
    let v = y.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Checks `f`'s gradient at `point` on every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let all: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, eps, &all)
}

/// Checks `f`'s gradient at `point` on a subset of coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let analytic = {
        let g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let y = f(&g, x)?;
        if !y.item().is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        g.backward(y)?.get(x)
    };
    let f0 = eval(&f, point)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    for &i in coords {
        if i >= point.numel() {
            return Err(Error::invalid(format!("coordinate {i} out of range")));
        }
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fp = eval(&f, &plus)?;
        let fm = eval(&f, &minus)?;
        let forward = (fp - f0) / eps;
        let backward = (f0 - fm) / eps;
        let jump = (forward - backward).abs();
        if jump > f64::max(1e-3, 0.1 * (forward.abs() + backward.abs())) {
            // Smooth curvature shrinks the one-sided gap with the step; a kink does not.
            let small = eps / 10.0;
            let mut p2 = point.clone();
            p2.data_mut()[i] += small;
            let mut m2 = point.clone();
            m2.data_mut()[i] -= small;
            let gap = ((eval(&f, &p2)? - f0) / small - (f0 - eval(&f, &m2)?) / small).abs();
            if gap > 0.5 * jump {
                report.excluded.push(i);
                continue;
            }
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
