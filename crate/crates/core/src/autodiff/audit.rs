//! Finite-difference audit of every differentiable op and of small random
//! networks assembled from them.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{concat, grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::operators::{DenseMap, LinearMap};

type Scalar = Box<dyn for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>>;

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Values with magnitude in `[0.3, 1]` and random sign, away from the kinks
/// of ReLU, |·| and soft-thresholding at 0.1.
fn point(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.3..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Random projection to a scalar, so that no gradient is trivially uniform.
/// Uses the leading `v.numel()` weights.
fn project<'g>(g: &'g Graph, v: Var<'g>, weights: &Tensor) -> Result<Var<'g>> {
    let n = v.numel();
    let w = Tensor::new(vec![n], weights.data()[..n].to_vec())?;
    v.reshape(&[n])?.mul(g.constant(w))?.sum()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    point(rng, &[n])
}

fn catalog(rng: &mut ChaCha8Rng) -> Vec<(String, Tensor, Scalar)> {
    let mut out: Vec<(String, Tensor, Scalar)> = Vec::new();
    let mut add = |name: &str, p: Tensor, f: Scalar| out.push((name.to_string(), p, f));
    let pair = [2, 3, 4];

    macro_rules! binary {
        ($name:expr, $op:ident) => {{
            let r = weights(rng, 12);
            add(
                $name,
                point(rng, &pair),
                Box::new(move |g, x| {
                    let a = x.slice(0, 0, 1)?;
                    let b = x.slice(0, 1, 1)?;
                    project(g, a.$op(b)?, &r)
                }),
            );
        }};
    }
    binary!("add", add);
    binary!("sub", sub);
    binary!("mul", mul);
    {
        let r = weights(rng, 12);
        add(
            "div",
            point(rng, &pair),
            Box::new(move |g, x| {
                let a = x.slice(0, 0, 1)?;
                let b = x.slice(0, 1, 1)?.mul(x.slice(0, 1, 1)?)?.add(g.constant(Tensor::full(&[1, 3, 4], 0.5)))?;
                project(g, a.div(b)?, &r)
            }),
        );
    }
    macro_rules! unary {
        ($name:expr, $shape:expr, |$v:ident| $body:expr) => {{
            let shape: Vec<usize> = $shape.to_vec();
            let p = point(rng, &shape);
            let r = weights(rng, 4 * p.numel());
            add(
                $name,
                p,
                Box::new(move |g, $v| {
                    let y = $body?;
                    if y.numel() == 1 {
                        Ok(y.scale(1.7)?)
                    } else {
                        project(g, y, &r)
                    }
                }),
            );
        }};
    }
    unary!("scale", [3, 4], |x| x.scale(-1.3));
    unary!("silu", [3, 4], |x| x.silu());
    unary!("relu", [3, 4], |x| x.relu());
    unary!("sin", [3, 4], |x| x.sin());
    unary!("cos", [3, 4], |x| x.cos());
    unary!("soft_threshold", [3, 4], |x| x.soft_threshold(0.1));
    unary!("sum", [3, 4], |x| x.sin().and_then(|s| s.sum()));
    unary!("mean", [3, 4], |x| x.sin().and_then(|s| s.mean()));
    unary!("sq_norm", [3, 4], |x| x.sq_norm());
    unary!("l2_norm", [3, 4], |x| x.l2_norm());
    unary!("l1_norm", [3, 4], |x| x.l1_norm());
    unary!("reshape", [3, 4], |x| x.reshape(&[2, 6]).and_then(|y| y.sin()));
    unary!("slice", [3, 4], |x| x.slice(1, 1, 2).and_then(|y| y.sin()));
    unary!("broadcast_to", [1, 4], |x| x.broadcast_to(&[3, 4]).and_then(|y| y.sin()));
    unary!("upsample2x", [1, 2, 3, 3], |x| x.upsample2x());
    unary!("avgpool2x", [1, 2, 4, 4], |x| x.avgpool2x());
    {
        let r = weights(rng, 3);
        add(
            "scale_by",
            point(rng, &[4]),
            Box::new(move |g, x| {
                let s = x.slice(0, 0, 1)?.reshape(&[])?;
                project(g, x.slice(0, 1, 3)?.scale_by(s)?, &r)
            }),
        );
    }
    {
        let r = weights(rng, 8);
        add(
            "matmul",
            point(rng, &[2 * 3 + 3 * 4]),
            Box::new(move |g, x| {
                let a = x.slice(0, 0, 6)?.reshape(&[2, 3])?;
                let b = x.slice(0, 6, 12)?.reshape(&[3, 4])?;
                project(g, a.matmul(b)?, &r)
            }),
        );
    }
    {
        let r = weights(rng, 2 * 25);
        add(
            "conv2d",
            point(rng, &[2 * 25 + 2 * 2 * 9]),
            Box::new(move |g, x| {
                let img = x.slice(0, 0, 50)?.reshape(&[1, 2, 5, 5])?;
                let w = x.slice(0, 50, 36)?.reshape(&[2, 2, 3, 3])?;
                project(g, img.conv2d(w)?, &r)
            }),
        );
    }
    {
        let r = weights(rng, 4 * 9);
        add(
            "group_norm",
            point(rng, &[4 * 9 + 8]),
            Box::new(move |g, x| {
                let v = x.slice(0, 0, 36)?.reshape(&[1, 4, 3, 3])?;
                let gamma = x.slice(0, 36, 4)?;
                let beta = x.slice(0, 40, 4)?;
                project(g, v.group_norm(gamma, beta, 2)?, &r)
            }),
        );
    }
    {
        add(
            "dot",
            point(rng, &[8]),
            Box::new(|_, x| x.slice(0, 0, 4)?.dot(x.slice(0, 4, 4)?)),
        );
    }
    {
        let r = weights(rng, 12);
        add(
            "concat",
            point(rng, &[10]),
            Box::new(move |g, x| {
                let a = x.slice(0, 0, 4)?.reshape(&[1, 4])?;
                let b = x.slice(0, 4, 6)?.sin()?.reshape(&[1, 6])?;
                let c = concat(&[a, b, a.scale(2.0)?.slice(1, 0, 2)?], 1)?;
                project(g, c, &r)
            }),
        );
    }
    {
        let data: Vec<f64> = point(rng, &[5 * 4]).into_data();
        let map: Arc<dyn LinearMap> = Arc::new(DenseMap::new(5, 4, data).expect("dense map"));
        let r5 = weights(rng, 10);
        let r4 = weights(rng, 8);
        let m = map.clone();
        add(
            "linear_map",
            point(rng, &[2, 4]),
            Box::new(move |g, x| project(g, x.linear_map(&m)?, &r5)),
        );
        add(
            "linear_adjoint",
            point(rng, &[2, 5]),
            Box::new(move |g, x| project(g, x.linear_adjoint(&map)?, &r4)),
        );
    }
    out
}

/// Random conv net on an 8×8 input with every weight in the checked vector:
/// conv → group norm → SiLU → pool → conv → upsample → skip concat → dense.
fn random_network(rng: &mut ChaCha8Rng) -> (Tensor, Scalar) {
    let c1 = 2 * rng.random_range(1..=2);
    let c2 = rng.random_range(1..=3);
    let sizes = [64, c1 * 9, c1, c1, c2 * c1 * 9, (c2 + 1) * 64 * 3];
    let total: usize = sizes.iter().sum();
    let mut p = point(rng, &[total]);
    // keep the dense head small so the output stays O(1)
    let head = total - sizes[5];
    for v in &mut p.data_mut()[head..] {
        *v *= 0.1;
    }
    let f: Scalar = Box::new(move |_, x| {
        let mut at = 0;
        let mut take = |len: usize| {
            let s = x.slice(0, at, len);
            at += len;
            s
        };
        let input = take(64)?.reshape(&[1, 1, 8, 8])?;
        let w1 = take(c1 * 9)?.reshape(&[c1, 1, 3, 3])?;
        let gamma = take(c1)?;
        let beta = take(c1)?;
        let w2 = take(c2 * c1 * 9)?.reshape(&[c2, c1, 3, 3])?;
        let dense = take((c2 + 1) * 64 * 3)?.reshape(&[(c2 + 1) * 64, 3])?;
        let h = input.conv2d(w1)?.group_norm(gamma, beta, 2)?.silu()?;
        let h = h.avgpool2x()?.conv2d(w2)?.upsample2x()?;
        let h = concat(&[h, input], 1)?.reshape(&[1, (c2 + 1) * 64])?;
        h.matmul(dense)?.sin()?.sq_norm()
    });
    (p, f)
}

/// Runs the op catalog and three random networks at central-difference
/// step `eps`.
pub fn audit(seed: u64, eps: f64) -> Result<Vec<AuditEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, p, f) in catalog(&mut rng) {
        entries.push(AuditEntry {
            name,
            report: grad_check(f, &p, eps)?,
        });
    }
    for i in 0..3 {
        let (p, f) = random_network(&mut rng);
        entries.push(AuditEntry {
            name: format!("random_net_{i}"),
            report: grad_check(f, &p, eps)?,
        });
    }
    Ok(entries)
}
