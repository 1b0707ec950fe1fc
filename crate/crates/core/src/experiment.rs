//! Experiment configuration and the gen → train → eval pipeline.
//!
//! A config file is one JSON document with a `defaults` layer and an
//! `overrides` layer. Both are partial; the resolved experiment is the
//! built-in published settings, then `defaults`, then `overrides`, merged
//! key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::{generate_synthetic, Dataset, DatasetConfig, SyntheticData};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport, Protocol, ResultsRow, Space, WhiteningTransform};
use crate::geometry::EmbeddingSource;
use crate::losses::LossKind;
use crate::mining::MiningConfig;
use crate::models::{Architecture, EmbeddingCache, StudentModel, TeacherConfig, TeacherModel};
use crate::trainer::{self, TrainConfig, TrainObserver, TrainOutcome};

pub const DATA_DIR: &str = "data";
pub const TEACHER_FILE: &str = "teacher.f32";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const INIT_CHECKPOINT_DIR: &str = "checkpoint_init";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    /// Every component seed is derived from this one.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub train: TrainConfig,
    pub mining: MiningConfig,
    pub protocols: Vec<Protocol>,
    /// Fit and apply supervised whitening before ranking.
    pub whitening: bool,
    pub output_dir: PathBuf,
}

impl Experiment {
    /// Published hyper-parameters with the default synthetic dataset.
    pub fn published_defaults() -> Self {
        Experiment {
            seed: 0,
            dataset: DatasetConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig { hidden: vec![64] },
            train: TrainConfig::published_default(LossKind::ContrastivePlus),
            mining: MiningConfig::default(),
            protocols: vec![Protocol::Symmetric, Protocol::Asymmetric],
            whitening: true,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            d_in: self.dataset.d_in,
            hidden: self.student.hidden.clone(),
            d_out: self.dataset.d_teacher,
        }
    }

    /// Copies seeds derived from `self.seed` into every component.
    pub fn with_derived_seeds(mut self) -> Self {
        self.dataset.seed = derive_seed(self.seed, "dataset");
        self.teacher.seed = derive_seed(self.seed, "teacher");
        self.train.seed = derive_seed(self.seed, "train");
        self.mining.seed = derive_seed(self.seed, "mining");
        self
    }

    pub fn student_seed(&self) -> u64 {
        derive_seed(self.seed, "student")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.train.loss.kind.uses_labels() {
            if self.mining.k_negatives == 0 {
                return Err(Error::config("k_negatives must be at least 1"));
            }
            if self.mining.pool_size > self.dataset.train_size {
                return Err(Error::config(format!(
                    "pool_size {} exceeds train_size {}",
                    self.mining.pool_size, self.dataset.train_size
                )));
            }
        }
        self.architecture().validate()?;
        Ok(())
    }

    /// Digest of the resolved settings; the output directory is left out.
    pub fn digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v.as_object_mut().unwrap().remove("output_dir");
        let bytes = serde_json::to_vec(&v)?;
        Ok(crate::models::hex_digest(&Sha256::digest(&bytes)))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join(DATA_DIR)
    }
}

/// Desk-scale layer: fewer tuples and epochs, and every published learning
/// rate times 10 (ratios between losses kept).
pub fn desk_overrides() -> Value {
    serde_json::json!({
        "train": {
            "tuples_per_epoch": 200,
            "epochs_symmetric": 50,
            "epochs_asymmetric": 150,
            "learning_rates": [
                {"loss": "contrastive", "mode": "symmetric", "lr": 1e-4},
                {"loss": "contrastive", "mode": "asymmetric", "lr": 1e-2},
                {"loss": "contrastive_plus", "lr": 1e-2},
                {"loss": "triplet", "lr": 1e-7},
                {"loss": "multi_similarity", "lr": 1e-7},
                {"loss": "regression", "lr": 1e-2},
                {"loss": "rkd", "lr": 1e-1},
                {"loss": "dark_rank", "lr": 1e-5},
            ],
        }
    })
}

impl ConfigFile {
    /// Published values as `defaults`, desk-scale values as `overrides`.
    pub fn desk() -> Self {
        ConfigFile {
            defaults: serde_json::to_value(Experiment::published_defaults()).expect("plain struct"),
            overrides: desk_overrides(),
        }
    }
}

/// Stable 64-bit seed for a named component.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// Recursively merges `patch` into `base`: objects key by key, anything else
/// replaced.
pub fn deep_merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// The two layers of a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub defaults: Value,
    #[serde(default)]
    pub overrides: Value,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Built-in settings, then `defaults`, then `overrides`, then `extra`.
    pub fn resolve_with(&self, extra: &[Value]) -> Result<Experiment> {
        let mut v = serde_json::to_value(Experiment::published_defaults())?;
        for layer in [&self.defaults, &self.overrides].into_iter().chain(extra) {
            if !layer.is_null() {
                if !layer.is_object() {
                    return Err(Error::config("config layers must be JSON objects"));
                }
                deep_merge(&mut v, layer);
            }
        }
        let exp: Experiment = serde_json::from_value(v).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        let exp = exp.with_derived_seeds();
        exp.validate()?;
        Ok(exp)
    }

    pub fn resolve(&self) -> Result<Experiment> {
        self.resolve_with(&[])
    }
}

/// Generated dataset with its teacher.
pub struct Prepared {
    pub data: Dataset,
    pub teacher: TeacherModel,
}

pub fn generate(exp: &Experiment) -> Result<Prepared> {
    let SyntheticData { dataset, centers } = generate_synthetic(&exp.dataset)?;
    let teacher = TeacherModel::from_class_signal(&dataset, &centers, &exp.teacher)?;
    Ok(Prepared { data: dataset, teacher })
}

pub fn save_prepared(p: &Prepared, dir: &Path) -> Result<()> {
    p.data.save(dir)?;
    p.teacher.save(&dir.join(TEACHER_FILE))
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let data = Dataset::load(dir)?;
    let teacher = TeacherModel::load(&dir.join(TEACHER_FILE))?;
    if teacher.len() != data.inputs.rows() {
        return Err(Error::Format {
            path: dir.join(TEACHER_FILE),
            detail: format!("teacher has {} rows, dataset has {}", teacher.len(), data.inputs.rows()),
        });
    }
    Ok(Prepared { data, teacher })
}

pub fn initial_student(exp: &Experiment) -> Result<StudentModel> {
    StudentModel::init(exp.architecture(), exp.student_seed())
}

pub fn train(exp: &Experiment, p: &Prepared, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    let init = initial_student(exp)?;
    trainer::train_with_observer(&p.data, &p.teacher, &init, &exp.train, &exp.mining, observer)
}

/// Whitening for `protocol`: fitted on the training examples and their
/// positive pairs, in the student space for symmetric and the teacher space
/// for asymmetric testing.
pub fn fit_protocol_whitening<S>(protocol: Protocol, student: &S, p: &Prepared) -> Result<WhiteningTransform>
where
    S: EmbeddingSource + ?Sized,
{
    let ids = p.data.train.ids();
    let pairs = p.data.train.positive_pairs();
    match protocol.whitening_space() {
        Space::Student => evaluation::fit_whitening(student, ids, &pairs, Space::Student),
        Space::Teacher => evaluation::fit_whitening(&p.teacher, ids, &pairs, Space::Teacher),
    }
}

/// Evaluates `student` on every retrieval tier under `protocol`, fitting the
/// whitening first when the experiment asks for it.
pub fn evaluate<S>(exp: &Experiment, p: &Prepared, student: &S, protocol: Protocol) -> Result<Vec<EvalReport>>
where
    S: EmbeddingSource + Sync + ?Sized,
{
    let whitening = if exp.whitening {
        Some(fit_protocol_whitening(protocol, student, p)?)
    } else {
        None
    };
    evaluate_with(exp, p, student, protocol, whitening.as_ref())
}

/// Like [`evaluate`] with a given (or no) whitening.
pub fn evaluate_with<S>(
    exp: &Experiment,
    p: &Prepared,
    student: &S,
    protocol: Protocol,
    whitening: Option<&WhiteningTransform>,
) -> Result<Vec<EvalReport>>
where
    S: EmbeddingSource + Sync + ?Sized,
{
    let digest = exp.digest()?;
    p.data
        .tasks
        .iter()
        .map(|task| evaluation::evaluate(protocol, student, &p.teacher, task, whitening, &digest))
        .collect()
}

/// Student embeddings for every example.
pub fn embed_all(student: &StudentModel, data: &Dataset) -> Result<EmbeddingCache> {
    let ids: Vec<_> = (0..data.inputs.rows() as u32).map(crate::dataset::ExampleId).collect();
    EmbeddingCache::compute(student, &data.inputs, &ids)
}

pub fn results_rows(exp: &Experiment, reports: &[EvalReport], timestamp: u64) -> Vec<ResultsRow> {
    let mode = exp
        .train
        .loss
        .resolved()
        .map(|l| l.mode.as_str())
        .unwrap_or("invalid");
    reports
        .iter()
        .map(|r| ResultsRow {
            protocol: r.protocol,
            tier: r.tier.clone(),
            loss: exp.train.loss.kind.as_str().to_string(),
            mode: mode.to_string(),
            map: r.map,
            mp10: r.mp10,
            seed: exp.seed,
            config_digest: r.config_digest.clone(),
            timestamp,
        })
        .collect()
}

/// In-memory result of a full run.
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub reports: Vec<EvalReport>,
}

impl RunResult {
    /// mAP of `tier` under `protocol`.
    pub fn map(&self, protocol: Protocol, tier: &str) -> Option<f64> {
        self.reports
            .iter()
            .find(|r| r.protocol == protocol && r.tier == tier)
            .map(|r| r.map)
    }
}

/// Train, then evaluate under every configured protocol, all in memory.
pub fn run(exp: &Experiment, p: &Prepared) -> Result<RunResult> {
    struct Quiet;
    impl TrainObserver for Quiet {}
    let outcome = train(exp, p, &mut Quiet)?;
    let cache = embed_all(&outcome.best, &p.data)?;
    let mut reports = Vec::new();
    for &protocol in &exp.protocols {
        reports.extend(evaluate(exp, p, &cache, protocol)?);
    }
    Ok(RunResult { outcome, reports })
}
