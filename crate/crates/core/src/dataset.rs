//! Training sets with pairwise supervision, retrieval tasks, and the
//! synthetic "landmark" generator.
//!
//! All examples share one id space: training ids first, then the database,
//! then the query tiers. Class ids are ground truth for the generator and for
//! oracle checks; losses only ever see `P(a)`, `N(a)` and `U(a)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ExampleId(pub u32);

impl ExampleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Examples available for training, with per-anchor supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    ids: Vec<ExampleId>,
    positives: BTreeMap<ExampleId, Vec<ExampleId>>,
    negatives: BTreeMap<ExampleId, Vec<ExampleId>>,
}

impl TrainingSet {
    pub fn new(
        ids: Vec<ExampleId>,
        positives: BTreeMap<ExampleId, Vec<ExampleId>>,
        negatives: BTreeMap<ExampleId, Vec<ExampleId>>,
    ) -> Result<Self> {
        let set = TrainingSet {
            ids,
            positives,
            negatives,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let members: BTreeSet<_> = self.ids.iter().copied().collect();
        if members.len() != self.ids.len() {
            return Err(Error::config("training set contains duplicate ids"));
        }
        for (map, what) in [(&self.positives, "positive"), (&self.negatives, "negative")] {
            for (a, xs) in map {
                if !members.contains(a) {
                    return Err(Error::UnknownId(*a));
                }
                for x in xs {
                    if x == a {
                        return Err(Error::config(format!("anchor {a} is its own {what}")));
                    }
                    if !members.contains(x) {
                        return Err(Error::UnknownId(*x));
                    }
                }
            }
        }
        for (a, ns) in &self.negatives {
            let ps = self.positives(*a);
            if let Some(n) = ns.iter().find(|n| ps.contains(n)) {
                return Err(Error::config(format!(
                    "{n} is both positive and negative for anchor {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn positives(&self, anchor: ExampleId) -> &[ExampleId] {
        self.positives.get(&anchor).map_or(&[], Vec::as_slice)
    }

    pub fn negatives(&self, anchor: ExampleId) -> &[ExampleId] {
        self.negatives.get(&anchor).map_or(&[], Vec::as_slice)
    }

    pub fn positive_map(&self) -> &BTreeMap<ExampleId, Vec<ExampleId>> {
        &self.positives
    }

    /// Replaces `N(a)`, e.g. with the output of a mining pass.
    pub fn set_negatives(&mut self, anchor: ExampleId, negatives: Vec<ExampleId>) -> Result<()> {
        let ps = self.positives(anchor);
        if let Some(n) = negatives.iter().find(|n| **n == anchor || ps.contains(n)) {
            return Err(Error::config(format!(
                "{n} cannot be a negative of anchor {anchor}"
            )));
        }
        self.negatives.insert(anchor, negatives);
        Ok(())
    }

    /// All (anchor, positive) pairs in anchor order.
    pub fn positive_pairs(&self) -> Vec<(ExampleId, ExampleId)> {
        self.positives
            .iter()
            .flat_map(|(a, ps)| ps.iter().map(move |p| (*a, *p)))
            .collect()
    }

    /// Draws `k` ids uniformly without replacement from the training set
    /// minus the anchor.
    pub fn sample_unlabeled<R: Rng + ?Sized>(
        &self,
        anchor: ExampleId,
        k: usize,
        rng: &mut R,
    ) -> Result<Vec<ExampleId>> {
        let pos = self
            .ids
            .binary_search(&anchor)
            .map_err(|_| Error::UnknownId(anchor))?;
        let available = self.ids.len() - 1;
        if k > available {
            return Err(Error::InsufficientCandidates {
                needed: k,
                available,
            });
        }
        Ok(index::sample(rng, available, k)
            .into_iter()
            .map(|i| self.ids[if i >= pos { i + 1 } else { i }])
            .collect())
    }
}

/// A retrieval benchmark: queries against a database with known positives.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTask {
    pub tier: String,
    pub database: Vec<ExampleId>,
    pub queries: Vec<ExampleId>,
    pub positives: BTreeMap<ExampleId, Vec<ExampleId>>,
    pub ignore: BTreeMap<ExampleId, Vec<ExampleId>>,
}

impl RetrievalTask {
    pub fn positives(&self, query: ExampleId) -> &[ExampleId] {
        self.positives.get(&query).map_or(&[], Vec::as_slice)
    }

    pub fn ignore(&self, query: ExampleId) -> &[ExampleId] {
        self.ignore.get(&query).map_or(&[], Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        let db: BTreeSet<_> = self.database.iter().copied().collect();
        for q in &self.queries {
            if db.contains(q) {
                return Err(Error::config(format!("query {q} is also in the database")));
            }
            for p in self.positives(*q) {
                if !db.contains(p) {
                    return Err(Error::UnknownId(*p));
                }
            }
            if let Some(x) = self.ignore(*q).iter().find(|x| self.positives(*q).contains(x)) {
                return Err(Error::config(format!("{x} is both positive and ignored for query {q}")));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub train_size: usize,
    pub db_size: usize,
    pub num_queries: usize,
    pub d_in: usize,
    pub d_teacher: usize,
    /// Expected norm of the noise added to a unit class center.
    pub intra_class_noise: f64,
    /// Noise multiplier for the hard query tier; `0` disables the tier.
    #[serde(default)]
    pub hard_noise_factor: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 50,
            train_size: 2000,
            db_size: 500,
            num_queries: 50,
            d_in: 32,
            d_teacher: 32,
            intra_class_noise: 1.0,
            hard_noise_factor: 1.5,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.db_size == 0 || self.num_queries == 0 {
            return Err(Error::config("num_classes, db_size and num_queries must be positive"));
        }
        if self.d_in == 0 || self.d_teacher == 0 {
            return Err(Error::config("d_in and d_teacher must be positive"));
        }
        if self.train_size < 2 * self.num_classes {
            return Err(Error::config(format!(
                "train_size ({}) must be at least 2 * num_classes ({})",
                self.train_size,
                2 * self.num_classes
            )));
        }
        if !(self.intra_class_noise >= 0.0) || !self.intra_class_noise.is_finite() {
            return Err(Error::config("intra_class_noise must be a finite value >= 0"));
        }
        if !(self.hard_noise_factor >= 0.0) || !self.hard_noise_factor.is_finite() {
            return Err(Error::config("hard_noise_factor must be a finite value >= 0"));
        }
        Ok(())
    }

    fn hard_queries(&self) -> usize {
        if self.hard_noise_factor > 0.0 {
            self.num_queries
        } else {
            0
        }
    }

    pub fn total_examples(&self) -> usize {
        self.train_size + self.db_size + self.num_queries + self.hard_queries()
    }
}

/// A complete dataset: inputs for every id, labels, and the splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub inputs: Matrix,
    /// Ground-truth class per id. Oracle and generator use only.
    pub classes: Vec<u32>,
    pub train: TrainingSet,
    pub tasks: Vec<RetrievalTask>,
}

/// Output of [`generate_synthetic`]; the class centers are needed to build
/// a teacher and are not persisted.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub centers: Matrix,
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    labels.shuffle(rng);
    labels
}

/// Draws class centers on the unit sphere and noisy examples around them.
pub fn generate_synthetic(cfg: &DatasetConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_in;

    let mut centers = Matrix::zeros(cfg.num_classes, d);
    for c in 0..cfg.num_classes {
        loop {
            let row = centers.row_mut(c);
            for x in row.iter_mut() {
                *x = rng.sample(StandardNormal);
            }
            let n = crate::geometry::l2_norm(row);
            if n > 1e-9 {
                row.iter_mut().for_each(|x| *x /= n);
                break;
            }
        }
    }

    let sigma = cfg.intra_class_noise / (d as f64).sqrt();
    let splits = [
        (cfg.train_size, sigma),
        (cfg.db_size, sigma),
        (cfg.num_queries, sigma),
        (cfg.hard_queries(), sigma * cfg.hard_noise_factor),
    ];
    let total = cfg.total_examples();
    let mut inputs = Matrix::zeros(total, d);
    let mut classes = Vec::with_capacity(total);
    let mut next = 0usize;
    let mut ranges = Vec::new();
    for (size, noise) in splits {
        let start = next;
        for label in balanced_labels(size, cfg.num_classes, &mut rng) {
            let center = centers.row(label as usize).to_vec();
            let row = inputs.row_mut(next);
            for (x, c) in row.iter_mut().zip(center) {
                let eps: f64 = rng.sample(StandardNormal);
                *x = c + noise * eps;
            }
            classes.push(label);
            next += 1;
        }
        ranges.push(start..next);
    }
    inputs.round_to_f32();

    let ids = |r: &std::ops::Range<usize>| -> Vec<ExampleId> {
        r.clone().map(|i| ExampleId(i as u32)).collect()
    };
    let train_ids = ids(&ranges[0]);
    let db_ids = ids(&ranges[1]);

    let mut by_class: BTreeMap<u32, Vec<ExampleId>> = BTreeMap::new();
    for &id in &train_ids {
        by_class.entry(classes[id.index()]).or_default().push(id);
    }
    let mut positives = BTreeMap::new();
    for &a in &train_ids {
        let mates: Vec<ExampleId> = by_class[&classes[a.index()]]
            .iter()
            .copied()
            .filter(|&x| x != a)
            .collect();
        let want = if rng.random_bool(0.5) { 2 } else { 1 };
        let k = want.min(mates.len());
        let mut chosen: Vec<ExampleId> =
            index::sample(&mut rng, mates.len(), k).into_iter().map(|i| mates[i]).collect();
        chosen.sort();
        positives.insert(a, chosen);
    }
    let train = TrainingSet::new(train_ids, positives, BTreeMap::new())?;

    let tier_names = ["medium", "hard"];
    let mut tasks = Vec::new();
    for (name, range) in tier_names.iter().zip(&ranges[2..]) {
        if range.is_empty() {
            continue;
        }
        let queries = ids(range);
        let positives = queries
            .iter()
            .map(|&q| {
                let ps = db_ids
                    .iter()
                    .copied()
                    .filter(|x| classes[x.index()] == classes[q.index()])
                    .collect();
                (q, ps)
            })
            .collect();
        let task = RetrievalTask {
            tier: name.to_string(),
            database: db_ids.clone(),
            queries,
            positives,
            ignore: BTreeMap::new(),
        };
        task.validate()?;
        tasks.push(task);
    }

    Ok(SyntheticData {
        dataset: Dataset {
            config: cfg.clone(),
            inputs,
            classes,
            train,
            tasks,
        },
        centers,
    })
}

pub const META_FILE: &str = "meta.json";
pub const INPUTS_FILE: &str = "inputs.f32";
pub const PAIRS_FILE: &str = "pairs.json";

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    total_examples: usize,
    config: DatasetConfig,
    classes: Vec<u32>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn input(&self, id: ExampleId) -> Result<&[f64]> {
        if id.index() >= self.inputs.rows() {
            return Err(Error::UnknownId(id));
        }
        Ok(self.inputs.row(id.index()))
    }

    pub fn class_of(&self, id: ExampleId) -> u32 {
        self.classes[id.index()]
    }

    pub fn task(&self, tier: &str) -> Option<&RetrievalTask> {
        self.tasks.iter().find(|t| t.tier == tier)
    }

    /// Writes `meta.json`, `inputs.f32` and `pairs.json` into `dir`.
    ///
    /// `pairs.json` maps every anchor (training anchors and queries alike) to
    /// its positive ids; the id ranges of each split follow from the sizes in
    /// `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            format_version: 1,
            total_examples: self.inputs.rows(),
            config: self.config.clone(),
            classes: self.classes.clone(),
        };
        write_file(&dir.join(META_FILE), &serde_json::to_vec_pretty(&meta)?)?;
        self.inputs.save(&dir.join(INPUTS_FILE))?;
        let mut pairs: BTreeMap<ExampleId, &Vec<ExampleId>> = BTreeMap::new();
        for (a, ps) in self.train.positive_map() {
            pairs.insert(*a, ps);
        }
        for t in &self.tasks {
            for (q, ps) in &t.positives {
                pairs.insert(*q, ps);
            }
        }
        write_file(&dir.join(PAIRS_FILE), &serde_json::to_vec(&pairs)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: Meta = serde_json::from_slice(&read_file(&meta_path)?)?;
        let cfg = meta.config;
        let inputs = Matrix::load(&dir.join(INPUTS_FILE))?;
        let bad = |detail: String| Error::Format {
            path: meta_path.clone(),
            detail,
        };
        if inputs.rows() != cfg.total_examples() || inputs.cols() != cfg.d_in {
            return Err(bad(format!(
                "inputs are {}x{}, meta expects {}x{}",
                inputs.rows(),
                inputs.cols(),
                cfg.total_examples(),
                cfg.d_in
            )));
        }
        if meta.classes.len() != inputs.rows() {
            return Err(bad("class list length does not match inputs".into()));
        }
        let mut pairs: BTreeMap<ExampleId, Vec<ExampleId>> =
            serde_json::from_slice(&read_file(&dir.join(PAIRS_FILE))?)?;

        let range_ids = |start: usize, len: usize| -> Vec<ExampleId> {
            (start..start + len).map(|i| ExampleId(i as u32)).collect()
        };
        let train_ids = range_ids(0, cfg.train_size);
        let db_ids = range_ids(cfg.train_size, cfg.db_size);
        let mut train_pos = BTreeMap::new();
        for a in &train_ids {
            if let Some(ps) = pairs.remove(a) {
                train_pos.insert(*a, ps);
            }
        }
        let train = TrainingSet::new(train_ids, train_pos, BTreeMap::new())?;
        let mut tasks = Vec::new();
        let mut start = cfg.train_size + cfg.db_size;
        for (tier, len) in [("medium", cfg.num_queries), ("hard", cfg.hard_queries())] {
            if len == 0 {
                continue;
            }
            let queries = range_ids(start, len);
            start += len;
            let positives = queries
                .iter()
                .map(|q| (*q, pairs.remove(q).unwrap_or_default()))
                .collect();
            let task = RetrievalTask {
                tier: tier.to_string(),
                database: db_ids.clone(),
                queries,
                positives,
                ignore: BTreeMap::new(),
            };
            task.validate()?;
            tasks.push(task);
        }
        if let Some(stray) = pairs.keys().next() {
            return Err(Error::UnknownId(*stray));
        }
        Ok(Dataset {
            config: cfg,
            inputs,
            classes: meta.classes,
            train,
            tasks,
        })
    }
}
