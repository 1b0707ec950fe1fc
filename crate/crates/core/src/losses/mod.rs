//! Per-anchor loss functions with analytic gradients.
//!
//! Every loss takes a [`Tuple`] of already-embedded vectors and returns the
//! value plus the gradient with respect to each student-embedded vector in the
//! tuple. Teacher-side vectors are constants and get no gradient. Under
//! [`SimilarityMode::Asymmetric`] only the anchor (and, for RKD/DarkRank, the
//! unlabeled examples) is student-embedded.

pub mod gradcheck;
mod labels;
mod teacher;

pub use gradcheck::{grad_check, kink_distance, random_instance, GradCheckReport, OwnedTuple};
pub use labels::{loss_contrastive, loss_multi_similarity, loss_triplet};
pub use teacher::{huber, loss_darkrank, loss_regression, loss_rkd};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SimilarityMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    ContrastivePlus,
    Triplet,
    MultiSimilarity,
    Regression,
    Rkd,
    DarkRank,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Contrastive,
        LossKind::ContrastivePlus,
        LossKind::Triplet,
        LossKind::MultiSimilarity,
        LossKind::Regression,
        LossKind::Rkd,
        LossKind::DarkRank,
    ];

    /// Whether the loss consumes `P(a)`/`N(a)` (and therefore needs mining).
    pub fn uses_labels(self) -> bool {
        matches!(
            self,
            LossKind::Contrastive
                | LossKind::ContrastivePlus
                | LossKind::Triplet
                | LossKind::MultiSimilarity
        )
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, LossKind::Rkd | LossKind::DarkRank)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::ContrastivePlus => "contrastive_plus",
            LossKind::Triplet => "triplet",
            LossKind::MultiSimilarity => "multi_similarity",
            LossKind::Regression => "regression",
            LossKind::Rkd => "rkd",
            LossKind::DarkRank => "dark_rank",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss kind {s:?}")))
    }
}

/// Which relational measurement RKD compares between the two models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RkdMeasure {
    /// Distance-wise plus angle-wise terms with Huber penalty.
    DistanceAngle,
    /// The anchor embedding itself, penalized by negative cosine similarity.
    AnchorIdentity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RkdConfig {
    pub distance_weight: f64,
    pub angle_weight: f64,
    pub huber_delta: f64,
    /// Divide anchor distances by their mean within each space.
    pub normalize_distances: bool,
    pub measure: RkdMeasure,
}

impl Default for RkdConfig {
    fn default() -> Self {
        RkdConfig {
            distance_weight: 1.0,
            angle_weight: 2.0,
            huber_delta: 1.0,
            normalize_distances: true,
            measure: RkdMeasure::DistanceAngle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rkd: RkdConfig,
    pub mode: SimilarityMode,
    pub include_self_positive: bool,
    pub use_positives: bool,
    pub use_negatives: bool,
}

impl LossConfig {
    /// Published hyper-parameters for each loss.
    pub fn published_default(kind: LossKind) -> Self {
        let base = LossConfig {
            kind,
            margin: 0.0,
            alpha: 1.0,
            beta: 1.0,
            rkd: RkdConfig::default(),
            mode: SimilarityMode::Asymmetric,
            include_self_positive: false,
            use_positives: true,
            use_negatives: true,
        };
        match kind {
            LossKind::Contrastive => LossConfig { margin: 0.7, ..base },
            LossKind::ContrastivePlus => LossConfig {
                margin: 0.7,
                include_self_positive: true,
                ..base
            },
            LossKind::Triplet => LossConfig { margin: 0.1, ..base },
            LossKind::MultiSimilarity => LossConfig { margin: 0.6, ..base },
            LossKind::Regression => base,
            LossKind::Rkd | LossKind::DarkRank => LossConfig {
                mode: SimilarityMode::Symmetric,
                ..base
            },
        }
    }

    /// Applies the fixed settings implied by the kind and validates.
    ///
    /// `ContrastivePlus` becomes asymmetric contrastive with the anchor as its
    /// own positive plus positives and negatives; `Regression` is always
    /// asymmetric.
    pub fn resolved(&self) -> Result<LossConfig> {
        let mut cfg = self.clone();
        match cfg.kind {
            LossKind::ContrastivePlus => {
                cfg.kind = LossKind::Contrastive;
                cfg.mode = SimilarityMode::Asymmetric;
                cfg.include_self_positive = true;
                cfg.use_positives = true;
                cfg.use_negatives = true;
            }
            LossKind::Regression => cfg.mode = SimilarityMode::Asymmetric,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.include_self_positive
            && self.mode == SimilarityMode::Symmetric
            && matches!(self.kind, LossKind::Contrastive | LossKind::ContrastivePlus)
        {
            return Err(Error::config(
                "the anchor can only be its own positive under asymmetric similarity",
            ));
        }
        if self.kind == LossKind::MultiSimilarity && !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::config(format!(
                "multi-similarity needs alpha > 0 and beta > 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        if self.kind == LossKind::Rkd && !(self.rkd.huber_delta > 0.0) {
            return Err(Error::config("huber_delta must be positive"));
        }
        if !self.margin.is_finite() {
            return Err(Error::config("margin must be finite"));
        }
        Ok(())
    }
}

/// One anchor with everything its loss term may look at.
#[derive(Debug, Clone, Default)]
pub struct Tuple<'a> {
    /// Student embedding of the anchor.
    pub anchor: &'a [f64],
    /// Teacher embedding of the anchor.
    pub anchor_teacher: Option<&'a [f64]>,
    /// Positives: student embeddings in symmetric mode, teacher in asymmetric.
    pub positives: Vec<&'a [f64]>,
    /// Negatives, same convention as `positives`.
    pub negatives: Vec<&'a [f64]>,
    /// Student embeddings of `U(a)`.
    pub unlabeled: Vec<&'a [f64]>,
    /// Teacher embeddings of `U(a)`, aligned with `unlabeled`.
    pub unlabeled_teacher: Vec<&'a [f64]>,
}

impl<'a> Tuple<'a> {
    pub(crate) fn require_anchor_teacher(&self) -> Result<&'a [f64]> {
        self.anchor_teacher
            .ok_or_else(|| Error::config("loss needs the teacher embedding of the anchor"))
    }
}

/// Gradients for the student-embedded members of a tuple.
///
/// `positives`/`negatives` are empty when those members were teacher-embedded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TupleGrad {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    pub unlabeled: Vec<Vec<f64>>,
}

impl TupleGrad {
    pub(crate) fn zeros(dim: usize) -> Self {
        TupleGrad {
            anchor: vec![0.0; dim],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: TupleGrad,
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Evaluates the configured loss on one tuple.
pub fn evaluate(cfg: &LossConfig, tuple: &Tuple<'_>) -> Result<LossOutput> {
    let cfg = cfg.resolved()?;
    match cfg.kind {
        LossKind::Contrastive | LossKind::ContrastivePlus => loss_contrastive(tuple, &cfg),
        LossKind::Triplet => loss_triplet(tuple, &cfg),
        LossKind::MultiSimilarity => loss_multi_similarity(tuple, &cfg),
        LossKind::Regression => loss_regression(tuple, &cfg),
        LossKind::Rkd => loss_rkd(tuple, &cfg),
        LossKind::DarkRank => loss_darkrank(tuple, &cfg),
    }
}

/// Sum of per-anchor losses, reduced left to right.
pub fn batch_loss(cfg: &LossConfig, tuples: &[Tuple<'_>]) -> Result<(f64, Vec<LossOutput>)> {
    let outputs = tuples
        .iter()
        .map(|t| evaluate(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let total = outputs.iter().fold(0.0, |acc, o| acc + o.value);
    Ok((total, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults() {
        assert_eq!(LossConfig::published_default(LossKind::Contrastive).margin, 0.7);
        assert_eq!(LossConfig::published_default(LossKind::Triplet).margin, 0.1);
        let ms = LossConfig::published_default(LossKind::MultiSimilarity);
        assert_eq!((ms.margin, ms.alpha, ms.beta), (0.6, 1.0, 1.0));
        let rkd = LossConfig::published_default(LossKind::Rkd).rkd;
        assert_eq!((rkd.distance_weight, rkd.angle_weight), (1.0, 2.0));
    }

    #[test]
    fn contrastive_plus_resolution() {
        let mut cfg = LossConfig::published_default(LossKind::ContrastivePlus);
        cfg.mode = SimilarityMode::Symmetric;
        cfg.use_negatives = false;
        let r = cfg.resolved().unwrap();
        assert_eq!(r.kind, LossKind::Contrastive);
        assert_eq!(r.mode, SimilarityMode::Asymmetric);
        assert!(r.include_self_positive && r.use_positives && r.use_negatives);

        let mut reg = LossConfig::published_default(LossKind::Regression);
        reg.mode = SimilarityMode::Symmetric;
        assert_eq!(reg.resolved().unwrap().mode, SimilarityMode::Asymmetric);
    }

    #[test]
    fn config_errors() {
        let mut c = LossConfig::published_default(LossKind::Contrastive);
        c.include_self_positive = true;
        c.mode = SimilarityMode::Symmetric;
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
        let mut ms = LossConfig::published_default(LossKind::MultiSimilarity);
        ms.alpha = 0.0;
        assert!(ms.resolved().is_err());
        ms.alpha = 1.0;
        ms.beta = -1.0;
        assert!(ms.resolved().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("nope".parse::<LossKind>().is_err());
    }
}
