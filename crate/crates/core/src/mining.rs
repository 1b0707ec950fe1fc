//! Per-epoch hard-negative mining.
//!
//! Candidates come from a random pool of the training set that is redrawn
//! each epoch. In asymmetric mode the candidate side is read from the frozen
//! teacher table, so only the anchors have to be re-embedded.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ExampleId, TrainingSet};
use crate::error::{Error, Result};
use crate::geometry::{pair_similarity, EmbeddingSource, SimilarityMode};
use crate::parallel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    /// Size of the random candidate subset drawn each epoch.
    pub pool_size: usize,
    pub k_negatives: usize,
    /// Also drop candidates sharing the anchor's ground-truth class.
    #[serde(default)]
    pub exclude_same_class: bool,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            pool_size: 1000,
            k_negatives: 5,
            exclude_same_class: true,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self, train: &TrainingSet) -> Result<()> {
        if self.k_negatives == 0 {
            return Err(Error::config("k_negatives must be at least 1"));
        }
        if self.pool_size > train.len() {
            return Err(Error::config(format!(
                "pool_size {} exceeds the training set size {}",
                self.pool_size,
                train.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedNegative {
    pub id: ExampleId,
    pub similarity: f64,
}

/// Uniform subset of the training ids, ascending, determined by `(seed, epoch)`.
pub fn refresh_epoch_pool(
    train: &TrainingSet,
    pool_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<Vec<ExampleId>> {
    if pool_size > train.len() {
        return Err(Error::InsufficientCandidates {
            needed: pool_size,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut picked: Vec<usize> = index::sample(&mut rng, train.len(), pool_size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| train.ids()[i]).collect())
}

/// Read-only inputs to a mining pass.
pub struct MiningContext<'a, S: ?Sized, T: ?Sized> {
    /// Student snapshot; must cover the anchors, and the pool in symmetric mode.
    pub student: &'a S,
    pub teacher: &'a T,
    pub train: &'a TrainingSet,
    /// Class labels, consulted only when `exclude_same_class` is set.
    pub classes: Option<&'a [u32]>,
}

/// Orders by descending similarity, then ascending id.
pub fn hardness_order(a: &MinedNegative, b: &MinedNegative) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.id.cmp(&b.id))
}

/// The `k` most similar admissible candidates for one anchor.
pub fn mine_for_anchor<S, T>(
    anchor: ExampleId,
    pool: &[ExampleId],
    mode: SimilarityMode,
    cfg: &MiningConfig,
    ctx: &MiningContext<'_, S, T>,
) -> Result<Vec<MinedNegative>>
where
    S: EmbeddingSource + ?Sized,
    T: EmbeddingSource + ?Sized,
{
    let positives = ctx.train.positives(anchor);
    let anchor_class = match (cfg.exclude_same_class, ctx.classes) {
        (true, Some(c)) => Some(c[anchor.index()]),
        (true, None) => {
            return Err(Error::config("exclude_same_class needs class labels"));
        }
        _ => None,
    };
    let f_a = ctx.student.embedding(anchor)?;
    let mut scored = Vec::with_capacity(pool.len());
    for &x in pool {
        if x == anchor || positives.contains(&x) {
            continue;
        }
        if let (Some(c), Some(classes)) = (anchor_class, ctx.classes) {
            if classes[x.index()] == c {
                continue;
            }
        }
        let similarity = pair_similarity(&f_a, x, mode, ctx.student, ctx.teacher)?;
        scored.push(MinedNegative { id: x, similarity });
    }
    if scored.len() < cfg.k_negatives {
        return Err(Error::InsufficientCandidates {
            needed: cfg.k_negatives,
            available: scored.len(),
        });
    }
    let k = cfg.k_negatives;
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, hardness_order);
        scored.truncate(k);
    }
    scored.sort_by(hardness_order);
    Ok(scored)
}

/// Mines `k` hard negatives for every anchor, in parallel over anchors.
pub fn mine_hard_negatives<S, T>(
    anchors: &[ExampleId],
    pool: &[ExampleId],
    mode: SimilarityMode,
    cfg: &MiningConfig,
    ctx: &MiningContext<'_, S, T>,
) -> Result<BTreeMap<ExampleId, Vec<MinedNegative>>>
where
    S: EmbeddingSource + Sync + ?Sized,
    T: EmbeddingSource + Sync + ?Sized,
{
    let mined = parallel::map(anchors, |&a| mine_for_anchor(a, pool, mode, cfg, ctx));
    anchors
        .iter()
        .zip(mined)
        .map(|(a, m)| m.map(|m| (*a, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::models::TeacherModel;
    use std::collections::BTreeSet;

    fn line_set(n: usize) -> TrainingSet {
        let ids = (0..n as u32).map(ExampleId).collect();
        let pos = BTreeMap::from([(ExampleId(0), vec![ExampleId(1)])]);
        TrainingSet::new(ids, pos, BTreeMap::new()).unwrap()
    }

    fn angles(n: usize) -> TeacherModel {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                vec![t.cos(), t.sin()]
            })
            .collect();
        TeacherModel::from_table(Matrix::from_rows(&rows, 2).unwrap()).unwrap()
    }

    #[test]
    fn pool_refresh_contract() {
        let set = line_set(200);
        assert_eq!(refresh_epoch_pool(&set, 200, 3, 9).unwrap(), set.ids());
        let a = refresh_epoch_pool(&set, 20, 0, 9).unwrap();
        let b = refresh_epoch_pool(&set, 20, 1, 9).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, refresh_epoch_pool(&set, 20, 0, 9).unwrap());
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 20);
        assert!(refresh_epoch_pool(&set, 201, 0, 9).is_err());
    }

    #[test]
    fn exact_pool_returns_all_sorted() {
        let set = line_set(8);
        let t = angles(8);
        let cfg = MiningConfig {
            pool_size: 8,
            k_negatives: 6,
            exclude_same_class: false,
            seed: 0,
        };
        let ctx = MiningContext {
            student: &t,
            teacher: &t,
            train: &set,
            classes: None,
        };
        let mined = mine_for_anchor(ExampleId(0), set.ids(), SimilarityMode::Asymmetric, &cfg, &ctx).unwrap();
        let ids: Vec<u32> = mined.iter().map(|m| m.id.0).collect();
        assert_eq!(ids, vec![2, 3, 4, 5, 6, 7]);
        assert!(mined.windows(2).all(|w| w[0].similarity >= w[1].similarity));

        let too_many = MiningConfig { k_negatives: 7, ..cfg };
        assert!(matches!(
            mine_for_anchor(ExampleId(0), set.ids(), SimilarityMode::Asymmetric, &too_many, &ctx),
            Err(Error::InsufficientCandidates { needed: 7, available: 6 })
        ));
    }

    #[test]
    fn ties_break_by_id_and_classes_filter() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.1]];
        let t = TeacherModel::from_table(Matrix::from_rows(&rows, 2).unwrap()).unwrap();
        let ids = (0..5).map(ExampleId).collect();
        let set = TrainingSet::new(ids, BTreeMap::new(), BTreeMap::new()).unwrap();
        let mut cfg = MiningConfig {
            pool_size: 5,
            k_negatives: 3,
            exclude_same_class: false,
            seed: 0,
        };
        let classes = [0, 1, 1, 1, 0];
        let ctx = MiningContext {
            student: &t,
            teacher: &t,
            train: &set,
            classes: Some(&classes),
        };
        let got: Vec<u32> = mine_for_anchor(ExampleId(0), set.ids(), SimilarityMode::Symmetric, &cfg, &ctx)
            .unwrap()
            .iter()
            .map(|m| m.id.0)
            .collect();
        assert_eq!(got, vec![4, 1, 2]);
        cfg.exclude_same_class = true;
        let got: Vec<u32> = mine_for_anchor(ExampleId(0), set.ids(), SimilarityMode::Symmetric, &cfg, &ctx)
            .unwrap()
            .iter()
            .map(|m| m.id.0)
            .collect();
        assert_eq!(got, vec![1, 2, 3]);
    }
}
