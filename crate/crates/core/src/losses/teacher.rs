//! Losses supervised by the teacher alone.

use super::{axpy, LossConfig, LossOutput, RkdMeasure, Tuple, TupleGrad};
use crate::error::{Error, Result};
use crate::geometry::{cosine_with_grad, euclidean_distance};

/// Huber penalty and its derivative.
pub fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// Negative cosine similarity between the student and teacher embeddings of
/// the anchor. Depends on no other example.
pub fn loss_regression(tuple: &Tuple<'_>, _cfg: &LossConfig) -> Result<LossOutput> {
    let s = cosine_with_grad(tuple.anchor, tuple.require_anchor_teacher()?)?;
    let mut grad = TupleGrad::zeros(tuple.anchor.len());
    axpy(&mut grad.anchor, -1.0, &s.d_u);
    Ok(LossOutput {
        value: -s.value,
        grad,
    })
}

/// Relational distillation over `U(a)`.
///
/// The distance term compares `|a - x|` across the two models for each
/// `x in U(a)`, optionally divided by the mean of those distances within each
/// model. The angle term compares `cos(a - x, a - y)` over ordered pairs of
/// distinct members of `U(a)`. Both use the Huber penalty.
pub fn loss_rkd(tuple: &Tuple<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    let teacher_anchor = tuple.require_anchor_teacher()?;
    if cfg.rkd.measure == RkdMeasure::AnchorIdentity {
        // psi = identity on the anchor, r = -sim
        let s = cosine_with_grad(tuple.anchor, teacher_anchor)?;
        let mut grad = TupleGrad::zeros(tuple.anchor.len());
        axpy(&mut grad.anchor, -1.0, &s.d_u);
        return Ok(LossOutput {
            value: -s.value,
            grad,
        });
    }

    let u = &tuple.unlabeled;
    let ut = &tuple.unlabeled_teacher;
    if u.len() != ut.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: ut.len(),
        });
    }
    let rkd = &cfg.rkd;
    let needed = if rkd.angle_weight != 0.0 { 2 } else { 1 };
    if u.len() < needed {
        return Err(Error::InsufficientCandidates {
            needed,
            available: u.len(),
        });
    }

    let dim = tuple.anchor.len();
    let mut grad = TupleGrad::zeros(dim);
    grad.unlabeled = vec![vec![0.0; dim]; u.len()];
    let mut value = 0.0;

    if rkd.distance_weight != 0.0 {
        let ds: Vec<f64> = u.iter().map(|x| euclidean_distance(tuple.anchor, x)).collect();
        let dt: Vec<f64> = ut.iter().map(|x| euclidean_distance(teacher_anchor, x)).collect();
        if ds.iter().any(|d| *d == 0.0) {
            return Err(Error::Degenerate("student anchor coincides with an unlabeled example".into()));
        }
        let n = ds.len() as f64;
        let (mu_s, mu_t) = if rkd.normalize_distances {
            (ds.iter().sum::<f64>() / n, dt.iter().sum::<f64>() / n)
        } else {
            (1.0, 1.0)
        };
        if mu_t == 0.0 {
            return Err(Error::Degenerate("teacher distances are all zero".into()));
        }
        let mut dh = Vec::with_capacity(ds.len());
        for (s, t) in ds.iter().zip(&dt) {
            let (h, d) = huber(s / mu_s - t / mu_t, rkd.huber_delta);
            value += rkd.distance_weight * h;
            dh.push(rkd.distance_weight * d);
        }
        // dL/d ds_y = dh_y / mu_s - (sum_x dh_x ds_x) / (n mu_s^2) when normalized
        let coupling = if rkd.normalize_distances {
            dh.iter().zip(&ds).map(|(h, d)| h * d).sum::<f64>() / (n * mu_s * mu_s)
        } else {
            0.0
        };
        for (y, x) in u.iter().enumerate() {
            let g = dh[y] / mu_s - coupling;
            let scale = g / ds[y];
            for k in 0..dim {
                let diff = tuple.anchor[k] - x[k];
                grad.anchor[k] += scale * diff;
                grad.unlabeled[y][k] -= scale * diff;
            }
        }
    }

    if rkd.angle_weight != 0.0 {
        let edges_s: Vec<Vec<f64>> = u
            .iter()
            .map(|x| tuple.anchor.iter().zip(x.iter()).map(|(a, b)| a - b).collect())
            .collect();
        let edges_t: Vec<Vec<f64>> = ut
            .iter()
            .map(|x| teacher_anchor.iter().zip(x.iter()).map(|(a, b)| a - b).collect())
            .collect();
        for x in 0..u.len() {
            for y in 0..u.len() {
                if x == y {
                    continue;
                }
                let s = cosine_with_grad(&edges_s[x], &edges_s[y])?;
                let t = cosine_with_grad(&edges_t[x], &edges_t[y])?.value;
                let (h, d) = huber(s.value - t, rkd.huber_delta);
                value += rkd.angle_weight * h;
                let c = rkd.angle_weight * d;
                axpy(&mut grad.anchor, c, &s.d_u);
                axpy(&mut grad.anchor, c, &s.d_v);
                axpy(&mut grad.unlabeled[x], -c, &s.d_u);
                axpy(&mut grad.unlabeled[y], -c, &s.d_v);
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Listwise ranking loss: for every `x in U(a)`, the members the teacher puts
/// no closer to the anchor than `x` should also trail `x` in the student.
///
/// `V(a, x)` uses `<=`, so it always contains `x` and teacher ties need no
/// tie-breaking.
pub fn loss_darkrank(tuple: &Tuple<'_>, _cfg: &LossConfig) -> Result<LossOutput> {
    let teacher_anchor = tuple.require_anchor_teacher()?;
    let u = &tuple.unlabeled;
    if u.is_empty() {
        return Err(Error::InsufficientCandidates {
            needed: 1,
            available: 0,
        });
    }
    if u.len() != tuple.unlabeled_teacher.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: tuple.unlabeled_teacher.len(),
        });
    }
    let student = u
        .iter()
        .map(|x| cosine_with_grad(tuple.anchor, x))
        .collect::<Result<Vec<_>>>()?;
    let teacher = tuple
        .unlabeled_teacher
        .iter()
        .map(|x| cosine_with_grad(teacher_anchor, x).map(|c| c.value))
        .collect::<Result<Vec<_>>>()?;

    let n = u.len();
    let mut value = 0.0;
    let mut d_s = vec![0.0; n];
    for x in 0..n {
        let members: Vec<usize> = (0..n).filter(|&y| teacher[y] <= teacher[x]).collect();
        let top = members
            .iter()
            .map(|&y| student[y].value)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = members.iter().map(|&y| (student[y].value - top).exp()).sum();
        let lse = top + sum.ln();
        value -= student[x].value - lse;
        d_s[x] -= 1.0;
        for &y in &members {
            d_s[y] += (student[y].value - top).exp() / sum;
        }
    }

    let dim = tuple.anchor.len();
    let mut grad = TupleGrad::zeros(dim);
    grad.unlabeled = vec![vec![0.0; dim]; n];
    for (y, s) in student.iter().enumerate() {
        axpy(&mut grad.anchor, d_s[y], &s.d_u);
        axpy(&mut grad.unlabeled[y], d_s[y], &s.d_v);
    }
    Ok(LossOutput { value, grad })
}
