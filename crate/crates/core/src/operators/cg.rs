use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Result of a plain conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖b − A x_k‖` for `k = 0..=iterations`.
    pub residual_norms: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared-residual ratio below which CG has hit round-off and further
/// iterations only amplify noise.
const BREAKDOWN: f64 = 1e-28;

/// Conjugate gradients for a symmetric positive definite `map`.
///
/// Each new residual is re-orthogonalized against the earlier ones, which
/// keeps the finite-termination property in floating point at the cost of
/// storing one vector per iteration. Stops after `max_iters` iterations or once `‖r‖ ≤ tol · ‖b‖`.
pub fn cg_solve(
    map: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    max_iters: usize,
    tol: f64,
    init: Option<&[f64]>,
) -> Result<CgOutcome> {
    let n = b.len();
    let mut x = match init {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(x0) => {
            return Err(Error::ShapeMismatch {
                op: "cg_solve",
                lhs: vec![n],
                rhs: vec![x0.len()],
            })
        }
        None => vec![0.0; n],
    };
    let mut ap = vec![0.0; n];
    map(&x, &mut ap);
    let mut r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let rs0 = rs;
    let b_norm = dot(b, b).sqrt();
    let mut residual_norms = vec![rs.sqrt()];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    while iterations < max_iters {
        if rs.sqrt() <= tol * b_norm || rs <= BREAKDOWN * rs0 || rs == 0.0 {
            break;
        }
        let norm = rs.sqrt();
        basis.push(r.iter().map(|v| v / norm).collect());
        map(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            if pap.is_finite() {
                break;
            }
            return Err(Error::Solver("non-finite curvature in CG".into()));
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for q in &basis {
            let c = dot(&r, q);
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= c * qi;
            }
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::Solver("non-finite residual in CG".into()));
        }
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
        iterations += 1;
        residual_norms.push(rs.sqrt());
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual_norms,
    })
}

/// Differentiable CG: every iteration is recorded on the graph so gradients
/// flow through the step sizes as well as the iterates. Returns the final
/// iterate and the number of iterations performed.
pub fn cg_unrolled<'g>(
    apply: impl Fn(Var<'g>) -> Result<Var<'g>>,
    b: Var<'g>,
    x0: Var<'g>,
    iters: usize,
) -> Result<(Var<'g>, usize)> {
    let mut x = x0;
    let mut r = b.sub(apply(x)?)?;
    let mut p = r;
    let mut rs = r.dot(r)?;
    let rs0 = rs.item();
    let mut done = 0;
    for _ in 0..iters {
        if rs.item() == 0.0 || rs.item() <= BREAKDOWN * rs0 {
            break;
        }
        let ap = apply(p)?;
        let pap = p.dot(ap)?;
        if !(pap.item() > 0.0) {
            break;
        }
        let alpha = rs.div(pap)?;
        x = x.add(p.scale_by(alpha)?)?;
        r = r.sub(ap.scale_by(alpha)?)?;
        let rs_new = r.dot(r)?;
        let beta = rs_new.div(rs)?;
        p = r.add(p.scale_by(beta)?)?;
        rs = rs_new;
        done += 1;
    }
    Ok((x, done))
}
