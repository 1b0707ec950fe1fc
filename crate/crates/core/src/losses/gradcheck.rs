//! Central finite-difference checks for the analytic loss gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{evaluate, LossConfig, LossKind, Tuple, TupleGrad};
use crate::error::Result;
use crate::geometry::{cosine_similarity, euclidean_distance, SimilarityMode};

/// Owned counterpart of [`Tuple`], so instances can be perturbed.
#[derive(Debug, Clone, Default)]
pub struct OwnedTuple {
    pub anchor: Vec<f64>,
    pub anchor_teacher: Option<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub unlabeled: Vec<Vec<f64>>,
    pub unlabeled_teacher: Vec<Vec<f64>>,
}

impl OwnedTuple {
    pub fn view(&self) -> Tuple<'_> {
        Tuple {
            anchor: &self.anchor,
            anchor_teacher: self.anchor_teacher.as_deref(),
            positives: self.positives.iter().map(Vec::as_slice).collect(),
            negatives: self.negatives.iter().map(Vec::as_slice).collect(),
            unlabeled: self.unlabeled.iter().map(Vec::as_slice).collect(),
            unlabeled_teacher: self.unlabeled_teacher.iter().map(Vec::as_slice).collect(),
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn around<R: Rng + ?Sized>(rng: &mut R, center: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let t = rng.random_range(lo..hi);
    let noise = gaussian(rng, center.len(), 0.5);
    center.iter().zip(noise).map(|(c, e)| t * c + e).collect()
}

/// A random tuple whose labeled members are correlated with the anchor, so
/// that hinges are active often enough to exercise both branches.
pub fn random_instance<R: Rng + ?Sized>(
    dim: usize,
    n_pos: usize,
    n_neg: usize,
    n_unlabeled: usize,
    rng: &mut R,
) -> OwnedTuple {
    let anchor = gaussian(rng, dim, 1.0);
    let anchor_teacher = around(rng, &anchor, 0.5, 1.5);
    let positives = (0..n_pos).map(|_| around(rng, &anchor, 0.5, 1.5)).collect();
    let negatives = (0..n_neg).map(|_| around(rng, &anchor, -0.5, 1.5)).collect();
    let unlabeled = (0..n_unlabeled).map(|_| gaussian(rng, dim, 1.0)).collect();
    let unlabeled_teacher = (0..n_unlabeled).map(|_| gaussian(rng, dim, 1.0)).collect();
    OwnedTuple {
        anchor,
        anchor_teacher: Some(anchor_teacher),
        positives,
        negatives,
        unlabeled,
        unlabeled_teacher,
    }
}

/// Smallest distance of any piecewise boundary (hinge or Huber switch) from
/// its switching point. Finite differences straddling such a point are not
/// meaningful.
pub fn kink_distance(cfg: &LossConfig, tuple: &Tuple<'_>) -> Result<f64> {
    let cfg = cfg.resolved()?;
    let a = tuple.anchor;
    let mut best = f64::INFINITY;
    match cfg.kind {
        LossKind::Contrastive if cfg.use_negatives => {
            for n in &tuple.negatives {
                best = best.min((cosine_similarity(a, n)? - cfg.margin).abs());
            }
        }
        LossKind::Triplet => {
            for p in &tuple.positives {
                let sp = cosine_similarity(a, p)?;
                for n in &tuple.negatives {
                    best = best.min((cosine_similarity(a, n)? - sp + cfg.margin).abs());
                }
            }
        }
        LossKind::Rkd => {
            let ta = tuple.require_anchor_teacher()?;
            let delta = cfg.rkd.huber_delta;
            let ds: Vec<f64> = tuple.unlabeled.iter().map(|x| euclidean_distance(a, x)).collect();
            let dt: Vec<f64> = tuple
                .unlabeled_teacher
                .iter()
                .map(|x| euclidean_distance(ta, x))
                .collect();
            let n = ds.len().max(1) as f64;
            let (ms, mt) = if cfg.rkd.normalize_distances {
                (ds.iter().sum::<f64>() / n, dt.iter().sum::<f64>() / n)
            } else {
                (1.0, 1.0)
            };
            for (s, t) in ds.iter().zip(&dt) {
                best = best.min(((s / ms - t / mt).abs() - delta).abs());
            }
        }
        _ => {}
    }
    Ok(best)
}

fn perturbed_value(
    cfg: &LossConfig,
    tuple: &OwnedTuple,
    slot: Slot,
    k: usize,
    delta: f64,
) -> Result<f64> {
    let mut t = tuple.clone();
    let v = match slot {
        Slot::Anchor => &mut t.anchor,
        Slot::Positive(i) => &mut t.positives[i],
        Slot::Negative(i) => &mut t.negatives[i],
        Slot::Unlabeled(i) => &mut t.unlabeled[i],
    };
    v[k] += delta;
    Ok(evaluate(cfg, &t.view())?.value)
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Anchor,
    Positive(usize),
    Negative(usize),
    Unlabeled(usize),
}

fn analytic<'g>(grad: &'g TupleGrad, slot: Slot) -> Option<&'g [f64]> {
    match slot {
        Slot::Anchor => Some(&grad.anchor),
        Slot::Positive(i) => grad.positives.get(i).map(Vec::as_slice),
        Slot::Negative(i) => grad.negatives.get(i).map(Vec::as_slice),
        Slot::Unlabeled(i) => grad.unlabeled.get(i).map(Vec::as_slice),
    }
}

/// Norm floor in the relative-error denominator.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// over all student-embedded vectors of the tuple, with central differences
/// of step `h`.
pub fn grad_check(cfg: &LossConfig, tuple: &OwnedTuple, h: f64) -> Result<f64> {
    let resolved = cfg.resolved()?;
    let out = evaluate(cfg, &tuple.view())?;
    let mut slots = vec![Slot::Anchor];
    if resolved.mode == SimilarityMode::Symmetric && resolved.kind.uses_labels() {
        slots.extend((0..tuple.positives.len()).map(Slot::Positive));
        slots.extend((0..tuple.negatives.len()).map(Slot::Negative));
    }
    if resolved.kind.uses_unlabeled() {
        slots.extend((0..tuple.unlabeled.len()).map(Slot::Unlabeled));
    }

    let dim = tuple.anchor.len();
    let mut worst = 0.0f64;
    for slot in slots {
        let zeros = vec![0.0; dim];
        let exact = analytic(&out.grad, slot).unwrap_or(&zeros);
        let mut diff2 = 0.0;
        let mut exact2 = 0.0;
        let mut num2 = 0.0;
        for k in 0..dim {
            let fd = (perturbed_value(cfg, tuple, slot, k, h)?
                - perturbed_value(cfg, tuple, slot, k, -h)?)
                / (2.0 * h);
            diff2 += (fd - exact[k]).powi(2);
            exact2 += exact[k].powi(2);
            num2 += fd * fd;
        }
        let denom = exact2.sqrt().max(num2.sqrt()).max(REL_FLOOR);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(worst)
}

/// Outcome of a randomized gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub instances: usize,
    pub resampled: usize,
}

impl GradCheckReport {
    /// Runs [`grad_check`] on `instances` random tuples, resampling any whose
    /// kink distance is below `1e-4`.
    pub fn run<R: Rng + ?Sized>(
        cfg: &LossConfig,
        shape: (usize, usize, usize, usize),
        instances: usize,
        h: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (dim, n_pos, n_neg, n_unl) = shape;
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            instances,
            resampled: 0,
        };
        for _ in 0..instances {
            let tuple = loop {
                let t = random_instance(dim, n_pos, n_neg, n_unl, rng);
                if kink_distance(cfg, &t.view())? >= 1e-4 {
                    break t;
                }
                report.resampled += 1;
            };
            report.max_rel_error = report.max_rel_error.max(grad_check(cfg, &tuple, h)?);
        }
        Ok(report)
    }
}
