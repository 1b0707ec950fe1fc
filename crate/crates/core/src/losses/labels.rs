//! Losses that use the positive/negative labels.

use super::{axpy, LossConfig, LossOutput, Tuple, TupleGrad};
use crate::error::{Error, Result};
use crate::geometry::{cosine_with_grad, CosineGrad, SimilarityMode};

fn similarities(anchor: &[f64], others: &[&[f64]]) -> Result<Vec<CosineGrad>> {
    others.iter().map(|x| cosine_with_grad(anchor, x)).collect()
}

fn side_grads(cfg: &LossConfig, n: usize, dim: usize) -> Vec<Vec<f64>> {
    match cfg.mode {
        SimilarityMode::Symmetric => vec![vec![0.0; dim]; n],
        SimilarityMode::Asymmetric => Vec::new(),
    }
}

/// `log(1 + sum exp(z_i))` and the weights `exp(z_i) / (1 + sum exp(z_j))`.
fn log1p_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let top = z.iter().copied().fold(0.0f64, f64::max);
    let base = (-top).exp();
    let exps: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let denom = base + exps.iter().sum::<f64>();
    let weights = exps.iter().map(|e| e / denom).collect();
    (top + denom.ln(), weights)
}

/// Contrastive loss: pull positives (and optionally the anchor's own teacher
/// embedding) in, push negatives above the margin out.
///
/// At exactly `s(a, n) == m` the hinge contributes a zero subgradient.
pub fn loss_contrastive(tuple: &Tuple<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    if cfg.include_self_positive && cfg.mode == SimilarityMode::Symmetric {
        return Err(Error::config(
            "the anchor can only be its own positive under asymmetric similarity",
        ));
    }
    let dim = tuple.anchor.len();
    let positives: &[&[f64]] = if cfg.use_positives { &tuple.positives } else { &[] };
    let negatives: &[&[f64]] = if cfg.use_negatives { &tuple.negatives } else { &[] };
    if !cfg.include_self_positive && positives.is_empty() && negatives.is_empty() {
        return Err(Error::config("contrastive tuple has no positive and no negative"));
    }

    let mut value = 0.0;
    let mut grad = TupleGrad::zeros(dim);
    if cfg.include_self_positive {
        let s = cosine_with_grad(tuple.anchor, tuple.require_anchor_teacher()?)?;
        value -= s.value;
        axpy(&mut grad.anchor, -1.0, &s.d_u);
    }

    grad.positives = side_grads(cfg, positives.len(), dim);
    for (i, s) in similarities(tuple.anchor, positives)?.into_iter().enumerate() {
        value -= s.value;
        axpy(&mut grad.anchor, -1.0, &s.d_u);
        if let Some(g) = grad.positives.get_mut(i) {
            axpy(g, -1.0, &s.d_v);
        }
    }

    grad.negatives = side_grads(cfg, negatives.len(), dim);
    for (i, s) in similarities(tuple.anchor, negatives)?.into_iter().enumerate() {
        let excess = s.value - cfg.margin;
        if excess > 0.0 {
            value += excess;
            axpy(&mut grad.anchor, 1.0, &s.d_u);
            if let Some(g) = grad.negatives.get_mut(i) {
                axpy(g, 1.0, &s.d_v);
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Triplet loss over all (positive, negative) pairs.
pub fn loss_triplet(tuple: &Tuple<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    if tuple.positives.is_empty() || tuple.negatives.is_empty() {
        return Err(Error::config("triplet loss needs at least one positive and one negative"));
    }
    let dim = tuple.anchor.len();
    let pos = similarities(tuple.anchor, &tuple.positives)?;
    let neg = similarities(tuple.anchor, &tuple.negatives)?;
    let mut value = 0.0;
    let mut grad = TupleGrad::zeros(dim);
    grad.positives = side_grads(cfg, pos.len(), dim);
    grad.negatives = side_grads(cfg, neg.len(), dim);
    for (i, p) in pos.iter().enumerate() {
        for (j, n) in neg.iter().enumerate() {
            let arg = n.value - p.value + cfg.margin;
            if arg <= 0.0 {
                continue;
            }
            value += arg;
            axpy(&mut grad.anchor, 1.0, &n.d_u);
            axpy(&mut grad.anchor, -1.0, &p.d_u);
            if cfg.mode == SimilarityMode::Symmetric {
                axpy(&mut grad.positives[i], -1.0, &p.d_v);
                axpy(&mut grad.negatives[j], 1.0, &n.d_v);
            }
        }
    }
    Ok(LossOutput { value, grad })
}

/// Multi-similarity loss: soft-weighted pull of positives and push of
/// negatives around the margin. Empty sides contribute `log 1 = 0`.
pub fn loss_multi_similarity(tuple: &Tuple<'_>, cfg: &LossConfig) -> Result<LossOutput> {
    let (alpha, beta) = (cfg.alpha, cfg.beta);
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::config("multi-similarity needs alpha > 0 and beta > 0"));
    }
    let dim = tuple.anchor.len();
    let pos = similarities(tuple.anchor, &tuple.positives)?;
    let neg = similarities(tuple.anchor, &tuple.negatives)?;
    let mut grad = TupleGrad::zeros(dim);
    grad.positives = side_grads(cfg, pos.len(), dim);
    grad.negatives = side_grads(cfg, neg.len(), dim);

    let zp: Vec<f64> = pos.iter().map(|p| -alpha * (p.value - cfg.margin)).collect();
    let (lp, wp) = log1p_sum_exp(&zp);
    let zn: Vec<f64> = neg.iter().map(|n| beta * (n.value - cfg.margin)).collect();
    let (ln, wn) = log1p_sum_exp(&zn);

    // d/ds_p = -w_p, d/ds_n = +w_n
    for (i, (p, w)) in pos.iter().zip(&wp).enumerate() {
        axpy(&mut grad.anchor, -w, &p.d_u);
        if let Some(g) = grad.positives.get_mut(i) {
            axpy(g, -w, &p.d_v);
        }
    }
    for (j, (n, w)) in neg.iter().zip(&wn).enumerate() {
        axpy(&mut grad.anchor, *w, &n.d_u);
        if let Some(g) = grad.negatives.get_mut(j) {
            axpy(g, *w, &n.d_v);
        }
    }
    Ok(LossOutput {
        value: lp / alpha + ln / beta,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, Tuple};
    use approx::assert_abs_diff_eq;

    fn cfg(kind: LossKind, mode: SimilarityMode) -> LossConfig {
        let mut c = LossConfig::published_default(kind);
        c.mode = mode;
        c
    }

    const E1: &[f64] = &[1.0, 0.0];
    const E2: &[f64] = &[0.0, 1.0];

    #[test]
    fn contrastive_examples() {
        let c = cfg(LossKind::Contrastive, SimilarityMode::Symmetric);
        let t = Tuple {
            anchor: E1,
            positives: vec![E1],
            negatives: vec![E2],
            ..Default::default()
        };
        assert_abs_diff_eq!(loss_contrastive(&t, &c).unwrap().value, -1.0, epsilon = 1e-15);

        let t = Tuple {
            anchor: E1,
            negatives: vec![E1],
            ..Default::default()
        };
        assert_abs_diff_eq!(loss_contrastive(&t, &c).unwrap().value, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn contrastive_inactive_hinge_is_flat() {
        let c = cfg(LossKind::Contrastive, SimilarityMode::Symmetric);
        let n1 = [0.2, 1.0];
        let n2 = [-1.0, 0.3];
        let t = Tuple {
            anchor: &[1.0, 0.1],
            negatives: vec![&n1, &n2],
            ..Default::default()
        };
        let out = loss_contrastive(&t, &c).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.anchor.iter().all(|g| *g == 0.0));
        assert!(out.grad.negatives.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn contrastive_hinge_kink_has_zero_subgradient() {
        let mut c = cfg(LossKind::Contrastive, SimilarityMode::Symmetric);
        c.margin = 0.0;
        let t = Tuple {
            anchor: E1,
            negatives: vec![E2],
            ..Default::default()
        };
        let out = loss_contrastive(&t, &c).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.anchor.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn contrastive_config_and_empty_errors() {
        let mut c = cfg(LossKind::Contrastive, SimilarityMode::Symmetric);
        let t = Tuple {
            anchor: E1,
            anchor_teacher: Some(E1),
            ..Default::default()
        };
        assert!(loss_contrastive(&t, &c).is_err());
        c.include_self_positive = true;
        assert!(matches!(loss_contrastive(&t, &c), Err(Error::Config(_))));
        c.mode = SimilarityMode::Asymmetric;
        assert_eq!(loss_contrastive(&t, &c).unwrap().value, -1.0);
    }

    #[test]
    fn asymmetric_mode_has_no_side_gradients() {
        let c = cfg(LossKind::Contrastive, SimilarityMode::Asymmetric);
        let t = Tuple {
            anchor: &[1.0, 0.2],
            positives: vec![E1],
            negatives: vec![E1, E2],
            ..Default::default()
        };
        let out = loss_contrastive(&t, &c).unwrap();
        assert!(out.grad.positives.is_empty() && out.grad.negatives.is_empty());
    }

    #[test]
    fn triplet_examples() {
        let mut c = cfg(LossKind::Triplet, SimilarityMode::Symmetric);
        c.margin = 0.1;
        let t = Tuple {
            anchor: E1,
            positives: vec![E1],
            negatives: vec![E2],
            ..Default::default()
        };
        assert_eq!(loss_triplet(&t, &c).unwrap().value, 0.0);
        let t = Tuple {
            anchor: E1,
            positives: vec![E2],
            negatives: vec![E1],
            ..Default::default()
        };
        assert_abs_diff_eq!(loss_triplet(&t, &c).unwrap().value, 1.1, epsilon = 1e-15);
        let t = Tuple {
            anchor: E1,
            negatives: vec![E1],
            ..Default::default()
        };
        assert!(loss_triplet(&t, &c).is_err());
    }

    #[test]
    fn triplet_matches_pairwise_brute_force() {
        let c = cfg(LossKind::Triplet, SimilarityMode::Symmetric);
        let a = [0.3, -0.2, 0.9];
        let ps = [[0.1, 0.0, 1.0], [0.5, -0.5, 0.2]];
        let ns = [
            [0.3, -0.1, 0.8],
            [-1.0, 0.0, 0.1],
            [0.2, -0.3, 0.7],
            [0.0, 1.0, 0.0],
            [0.4, -0.2, 1.0],
        ];
        let t = Tuple {
            anchor: &a,
            positives: ps.iter().map(|p| p.as_slice()).collect(),
            negatives: ns.iter().map(|n| n.as_slice()).collect(),
            ..Default::default()
        };
        let cos = |u: &[f64], v: &[f64]| crate::geometry::cosine_similarity(u, v).unwrap();
        let mut brute = 0.0;
        let mut active = 0;
        for p in &ps {
            for n in &ns {
                let v = cos(&a, n) - cos(&a, p) + c.margin;
                if v > 0.0 {
                    brute += v;
                    active += 1;
                }
            }
        }
        assert!(active > 0 && active < 10);
        assert_abs_diff_eq!(loss_triplet(&t, &c).unwrap().value, brute, epsilon = 1e-12);
    }

    #[test]
    fn multi_similarity_examples() {
        let c = cfg(LossKind::MultiSimilarity, SimilarityMode::Symmetric);
        let t = Tuple {
            anchor: E1,
            positives: vec![E1],
            negatives: vec![E2],
            ..Default::default()
        };
        // log(1 + e^-0.4) + log(1 + e^-0.6)
        assert_abs_diff_eq!(
            loss_multi_similarity(&t, &c).unwrap().value,
            0.9505032028858382,
            epsilon = 1e-12
        );
        let empty = Tuple {
            anchor: E1,
            ..Default::default()
        };
        assert_eq!(loss_multi_similarity(&empty, &c).unwrap().value, 0.0);

        let p = [0.6, 0.8];
        let once = Tuple {
            anchor: E1,
            positives: vec![&p],
            ..Default::default()
        };
        let twice = Tuple {
            anchor: E1,
            positives: vec![&p, &p],
            ..Default::default()
        };
        assert!(
            loss_multi_similarity(&twice, &c).unwrap().value
                > loss_multi_similarity(&once, &c).unwrap().value
        );
        let mut bad = c.clone();
        bad.beta = 0.0;
        assert!(loss_multi_similarity(&once, &bad).is_err());
    }

    #[test]
    fn log1p_sum_exp_is_stable() {
        let (v, w) = log1p_sum_exp(&[800.0, 800.0]);
        assert_abs_diff_eq!(v, 800.0 + 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        let (v, w) = log1p_sum_exp(&[]);
        assert_eq!(v, 0.0);
        assert!(w.is_empty());
    }
}
