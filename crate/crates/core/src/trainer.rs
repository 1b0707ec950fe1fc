//! SGD over tuples with per-epoch mining, learning-rate decay, weight decay
//! and validation-based model selection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ExampleId};
use crate::error::{Error, Result};
use crate::geometry::SimilarityMode;
use crate::losses::{self, LossConfig, LossKind, Tuple};
use crate::mining::{self, MiningConfig, MiningContext};
use crate::models::{EmbeddingCache, StudentModel, TeacherModel};
use crate::parallel;

/// Initial learning rate for one loss, optionally restricted to one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRate {
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<SimilarityMode>,
    pub lr: f64,
}

/// The published learning rates.
pub fn published_learning_rates() -> Vec<LearningRate> {
    use LossKind::*;
    use SimilarityMode::*;
    let entry = |loss, mode, lr| LearningRate { loss, mode, lr };
    vec![
        entry(Contrastive, Some(Symmetric), 1e-5),
        entry(Contrastive, Some(Asymmetric), 1e-3),
        entry(ContrastivePlus, None, 1e-3),
        entry(Triplet, None, 1e-8),
        entry(MultiSimilarity, None, 1e-8),
        entry(Regression, None, 1e-3),
        entry(Rkd, None, 1e-2),
        entry(DarkRank, None, 1e-6),
    ]
}

/// Picks the entry matching `(kind, mode)`, preferring a mode-specific one.
pub fn lookup_learning_rate(table: &[LearningRate], kind: LossKind, mode: SimilarityMode) -> Result<f64> {
    table
        .iter()
        .find(|e| e.loss == kind && e.mode == Some(mode))
        .or_else(|| table.iter().find(|e| e.loss == kind && e.mode.is_none()))
        .map(|e| e.lr)
        .ok_or_else(|| Error::config(format!("no learning rate for {kind} ({mode})")))
}

/// `eta0 * decay^epoch`, the rate used during `epoch` (0-based).
pub fn learning_rate_at(eta0: f64, decay: f64, epoch: usize) -> f64 {
    eta0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rates: Vec<LearningRate>,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub epochs_symmetric: usize,
    pub epochs_asymmetric: usize,
    /// Overrides the per-mode epoch counts.
    #[serde(default)]
    pub epochs: Option<usize>,
    pub tuples_per_epoch: usize,
    pub batch_tuples: usize,
    pub positives_per_tuple: usize,
    /// Size of `U(a)` for the losses that do not use labels.
    pub unlabeled_per_tuple: usize,
    pub validation_fraction: f64,
    /// Stop after this many epochs without a better validation score.
    #[serde(default)]
    pub patience: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn published_default(kind: LossKind) -> Self {
        TrainConfig {
            loss: LossConfig::published_default(kind),
            learning_rates: published_learning_rates(),
            lr_decay: 0.99,
            weight_decay: 1e-6,
            epochs_symmetric: 100,
            epochs_asymmetric: 300,
            epochs: None,
            tuples_per_epoch: 2000,
            batch_tuples: 10,
            positives_per_tuple: 1,
            unlabeled_per_tuple: 6,
            validation_fraction: 0.1,
            patience: Some(20),
            seed: 0,
        }
    }

    pub fn initial_learning_rate(&self) -> Result<f64> {
        lookup_learning_rate(&self.learning_rates, self.loss.kind, self.effective_mode()?)
    }

    fn effective_mode(&self) -> Result<SimilarityMode> {
        Ok(self.loss.resolved()?.mode)
    }

    pub fn resolved_epochs(&self) -> Result<usize> {
        Ok(self.epochs.unwrap_or(match self.effective_mode()? {
            SimilarityMode::Symmetric => self.epochs_symmetric,
            SimilarityMode::Asymmetric => self.epochs_asymmetric,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.resolved()?;
        let lr = self.initial_learning_rate()?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must be in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.resolved_epochs()? == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.tuples_per_epoch == 0 || self.batch_tuples == 0 {
            return Err(Error::config("tuples_per_epoch and batch_tuples must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction must be in (0, 1)"));
        }
        if self.loss.kind.uses_unlabeled() && self.unlabeled_per_tuple < 2 {
            return Err(Error::config("unlabeled_per_tuple must be at least 2"));
        }
        Ok(())
    }
}

/// Ids making up one loss term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleSpec {
    pub anchor: ExampleId,
    pub positives: Vec<ExampleId>,
    pub negatives: Vec<ExampleId>,
    pub unlabeled: Vec<ExampleId>,
}

/// Held-out anchors with fixed random tuples, and the remaining anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSplit {
    pub train_anchors: Vec<ExampleId>,
    pub validation: Vec<TupleSpec>,
}

const SPLIT_STREAM: u64 = u64::MAX;

fn excluded(data: &Dataset, mining: &MiningConfig, a: ExampleId, x: ExampleId) -> bool {
    x == a
        || data.train.positives(a).contains(&x)
        || (mining.exclude_same_class && data.classes[x.index()] == data.classes[a.index()])
}

fn random_negatives(
    data: &Dataset,
    mining: &MiningConfig,
    a: ExampleId,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ExampleId>> {
    let admissible: Vec<ExampleId> = data
        .train
        .ids()
        .iter()
        .copied()
        .filter(|&x| !excluded(data, mining, a, x))
        .collect();
    let k = mining.k_negatives;
    if admissible.len() < k {
        return Err(Error::InsufficientCandidates {
            needed: k,
            available: admissible.len(),
        });
    }
    Ok(index::sample(rng, admissible.len(), k)
        .into_iter()
        .map(|i| admissible[i])
        .collect())
}

fn sample_positives(data: &Dataset, a: ExampleId, count: usize, rng: &mut ChaCha8Rng) -> Vec<ExampleId> {
    let p = data.train.positives(a);
    let count = count.min(p.len());
    index::sample(rng, p.len(), count).into_iter().map(|i| p[i]).collect()
}

/// Splits the usable anchors into training and validation; validation tuples
/// get their negatives (or `U(a)`) once, here.
pub fn split_validation(data: &Dataset, cfg: &TrainConfig, mining: &MiningConfig) -> Result<ValidationSplit> {
    let kind = cfg.loss.kind;
    let anchors: Vec<ExampleId> = data
        .train
        .ids()
        .iter()
        .copied()
        .filter(|&a| !kind.uses_labels() || !data.train.positives(a).is_empty())
        .collect();
    let n_val = ((anchors.len() as f64) * cfg.validation_fraction).round() as usize;
    if n_val == 0 || n_val >= anchors.len() {
        return Err(Error::config(format!(
            "validation_fraction {} leaves {n_val} of {} anchors for validation",
            cfg.validation_fraction,
            anchors.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SPLIT_STREAM);
    let mut picked = index::sample(&mut rng, anchors.len(), n_val).into_vec();
    picked.sort_unstable();
    let mut is_val = vec![false; anchors.len()];
    picked.iter().for_each(|&i| is_val[i] = true);
    let mut validation = Vec::with_capacity(n_val);
    let mut train_anchors = Vec::with_capacity(anchors.len() - n_val);
    for (i, &a) in anchors.iter().enumerate() {
        if !is_val[i] {
            train_anchors.push(a);
            continue;
        }
        let spec = if kind.uses_labels() {
            TupleSpec {
                anchor: a,
                positives: sample_positives(data, a, cfg.positives_per_tuple, &mut rng),
                negatives: random_negatives(data, mining, a, &mut rng)?,
                unlabeled: Vec::new(),
            }
        } else {
            TupleSpec {
                anchor: a,
                positives: Vec::new(),
                negatives: Vec::new(),
                unlabeled: unlabeled_for(data, cfg, a, &mut rng)?,
            }
        };
        validation.push(spec);
    }
    Ok(ValidationSplit {
        train_anchors,
        validation,
    })
}

fn unlabeled_for(data: &Dataset, cfg: &TrainConfig, a: ExampleId, rng: &mut ChaCha8Rng) -> Result<Vec<ExampleId>> {
    if cfg.loss.kind.uses_unlabeled() {
        data.train.sample_unlabeled(a, cfg.unlabeled_per_tuple, rng)
    } else {
        Ok(Vec::new())
    }
}

/// Everything a loss term needs besides the parameters.
struct Env<'a> {
    data: &'a Dataset,
    teacher: &'a TeacherModel,
    loss: LossConfig,
}

impl Env<'_> {
    fn input(&self, id: ExampleId) -> Result<&[f64]> {
        self.data.input(id)
    }

    /// Loss value and, if asked, its gradient with respect to theta.
    fn objective(&self, student: &StudentModel, spec: &TupleSpec, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let sym = self.loss.mode == SimilarityMode::Symmetric;
        let forward = |ids: &[ExampleId]| -> Result<Vec<_>> {
            ids.iter().map(|&x| student.forward_cached(self.input(x)?)).collect()
        };
        let teacher_rows = |ids: &[ExampleId]| -> Result<Vec<&[f64]>> {
            ids.iter().map(|&x| self.teacher.embed(x)).collect()
        };

        let anchor = student.forward_cached(self.input(spec.anchor)?)?;
        let (pos_cache, neg_cache) = if sym {
            (forward(&spec.positives)?, forward(&spec.negatives)?)
        } else {
            (Vec::new(), Vec::new())
        };
        let unl_cache = forward(&spec.unlabeled)?;
        let (positives, negatives) = if sym {
            (
                pos_cache.iter().map(|c| c.output()).collect(),
                neg_cache.iter().map(|c| c.output()).collect(),
            )
        } else {
            (teacher_rows(&spec.positives)?, teacher_rows(&spec.negatives)?)
        };
        let tuple = Tuple {
            anchor: anchor.output(),
            anchor_teacher: Some(self.teacher.embed(spec.anchor)?),
            positives,
            negatives,
            unlabeled: unl_cache.iter().map(|c| c.output()).collect(),
            unlabeled_teacher: teacher_rows(&spec.unlabeled)?,
        };
        let out = losses::evaluate(&self.loss, &tuple)?;
        if !want_grad {
            return Ok((out.value, None));
        }
        let mut grad = vec![0.0; student.num_params()];
        student.accumulate_backward(&anchor, &out.grad.anchor, &mut grad)?;
        for (caches, grads) in [
            (&pos_cache, &out.grad.positives),
            (&neg_cache, &out.grad.negatives),
            (&unl_cache, &out.grad.unlabeled),
        ] {
            for (c, g) in caches.iter().zip(grads.iter()) {
                student.accumulate_backward(c, g, &mut grad)?;
            }
        }
        Ok((out.value, Some(grad)))
    }
}

/// `theta <- theta - lr * (grad + weight_decay * theta)`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * (g + weight_decay * *t);
    }
}

/// Mean loss over the validation tuples; lower is better.
pub fn validation_score(
    student: &StudentModel,
    data: &Dataset,
    teacher: &TeacherModel,
    loss: &LossConfig,
    validation: &[TupleSpec],
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::config("empty validation split"));
    }
    let env = Env {
        data,
        teacher,
        loss: loss.resolved()?,
    };
    let values = parallel::map(validation, |s| env.objective(student, s, false).map(|v| v.0));
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / validation.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_score: f64,
    pub best_so_far: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_score,best_so_far";

pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.epoch, r.lr, r.train_loss, r.val_score, r.best_so_far
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: StudentModel,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_score: f64,
    pub initial_score: f64,
    pub log: Vec<EpochRecord>,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// Called before any update of `epoch` with the parameters that will be
    /// used for mining and the candidate pool (empty for teacher-only losses).
    fn epoch_start(&mut self, _epoch: usize, _student: &StudentModel, _pool: &[ExampleId]) -> Result<()> {
        Ok(())
    }

    fn best_updated(&mut self, _epoch: usize, _student: &StudentModel) -> Result<()> {
        Ok(())
    }
}

struct NoObserver;
impl TrainObserver for NoObserver {}

pub fn train(
    data: &Dataset,
    teacher: &TeacherModel,
    student_init: &StudentModel,
    cfg: &TrainConfig,
    mining: &MiningConfig,
) -> Result<TrainOutcome> {
    train_with_observer(data, teacher, student_init, cfg, mining, &mut NoObserver)
}

fn numerical(epoch: usize, batch: usize, err: Error) -> Error {
    match err {
        Error::Degenerate(detail) => Error::Diverged { epoch, batch, detail },
        other => other,
    }
}

fn epoch_anchors(anchors: &[ExampleId], count: usize, rng: &mut ChaCha8Rng) -> Vec<ExampleId> {
    if count <= anchors.len() {
        index::sample(rng, anchors.len(), count)
            .into_iter()
            .map(|i| anchors[i])
            .collect()
    } else {
        (0..count).map(|_| anchors[rng.random_range(0..anchors.len())]).collect()
    }
}

pub fn train_with_observer(
    data: &Dataset,
    teacher: &TeacherModel,
    student_init: &StudentModel,
    cfg: &TrainConfig,
    mining: &MiningConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.loss.kind;
    if kind.uses_labels() {
        mining.validate(&data.train)?;
    }
    let arch = student_init.arch();
    if arch.d_in != data.inputs.cols() {
        return Err(Error::DimensionMismatch {
            expected: data.inputs.cols(),
            got: arch.d_in,
        });
    }
    if arch.d_out != teacher.dim() {
        return Err(Error::DimensionMismatch {
            expected: teacher.dim(),
            got: arch.d_out,
        });
    }
    let env = Env {
        data,
        teacher,
        loss: cfg.loss.resolved()?,
    };
    let mode = env.loss.mode;
    let eta0 = cfg.initial_learning_rate()?;
    let epochs = cfg.resolved_epochs()?;
    let split = split_validation(data, cfg, mining)?;
    let classes = mining.exclude_same_class.then_some(data.classes.as_slice());

    let mut student = student_init.clone();
    let initial_score =
        validation_score(&student, data, teacher, &cfg.loss, &split.validation).map_err(|e| numerical(0, 0, e))?;
    let mut best = student.clone();
    let mut best_score = initial_score;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let lr = learning_rate_at(eta0, cfg.lr_decay, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let anchors = epoch_anchors(&split.train_anchors, cfg.tuples_per_epoch, &mut rng);

        let specs: Vec<TupleSpec> = if kind.uses_labels() {
            let pool = mining::refresh_epoch_pool(&data.train, mining.pool_size, epoch, mining.seed)?;
            observer.epoch_start(epoch, &student, &pool)?;
            let mut ids = anchors.clone();
            if mode == SimilarityMode::Symmetric {
                ids.extend_from_slice(&pool);
            }
            ids.sort_unstable();
            ids.dedup();
            let cache = EmbeddingCache::compute(&student, &data.inputs, &ids).map_err(|e| numerical(epoch, 0, e))?;
            let ctx = MiningContext {
                student: &cache,
                teacher,
                train: &data.train,
                classes,
            };
            let mut unique = anchors.clone();
            unique.sort_unstable();
            unique.dedup();
            let mined: BTreeMap<_, _> =
                mining::mine_hard_negatives(&unique, &pool, mode, mining, &ctx).map_err(|e| numerical(epoch, 0, e))?;
            anchors
                .iter()
                .map(|&a| TupleSpec {
                    anchor: a,
                    positives: sample_positives(data, a, cfg.positives_per_tuple, &mut rng),
                    negatives: mined[&a].iter().map(|m| m.id).collect(),
                    unlabeled: Vec::new(),
                })
                .collect()
        } else {
            observer.epoch_start(epoch, &student, &[])?;
            anchors
                .iter()
                .map(|&a| {
                    Ok(TupleSpec {
                        anchor: a,
                        positives: Vec::new(),
                        negatives: Vec::new(),
                        unlabeled: unlabeled_for(data, cfg, a, &mut rng)?,
                    })
                })
                .collect::<Result<_>>()?
        };

        let mut epoch_loss = 0.0;
        for (b, batch) in specs.chunks(cfg.batch_tuples).enumerate() {
            let terms = parallel::map(batch, |s| env.objective(&student, s, true));
            let mut grad = vec![0.0; student.num_params()];
            let mut batch_loss = 0.0;
            for t in terms {
                let (value, g) = t.map_err(|e| numerical(epoch + 1, b, e))?;
                batch_loss += value;
                for (acc, gi) in grad.iter_mut().zip(g.expect("gradient requested")) {
                    *acc += gi;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: format!("batch loss is {batch_loss}"),
                });
            }
            epoch_loss += batch_loss;
            sgd_step(student.theta_mut(), &grad, lr, cfg.weight_decay);
            if student.theta().iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    detail: "parameters are no longer finite".into(),
                });
            }
        }

        let val_score = validation_score(&student, data, teacher, &cfg.loss, &split.validation)
            .map_err(|e| numerical(epoch + 1, 0, e))?;
        if !val_score.is_finite() {
            return Err(Error::Diverged {
                epoch: epoch + 1,
                batch: 0,
                detail: format!("validation score is {val_score}"),
            });
        }
        if val_score < best_score {
            best_score = val_score;
            best_epoch = epoch + 1;
            best = student.clone();
            observer.best_updated(best_epoch, &best)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: epoch_loss / specs.len() as f64,
            val_score,
            best_so_far: best_score,
        };
        log::debug!(
            "epoch {} lr {:.3e} train {:.6} val {:.6}",
            record.epoch,
            lr,
            record.train_loss,
            val_score
        );
        log.push(record);
        if let Some(p) = cfg.patience {
            if epoch + 1 - best_epoch >= p {
                log::info!("stopping after epoch {}: no improvement for {p} epochs", epoch + 1);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_score,
        initial_score,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, DatasetConfig};
    use crate::geometry::l2_norm;
    use crate::models::Architecture;

    fn small_data() -> Dataset {
        generate_synthetic(&DatasetConfig {
            num_classes: 8,
            train_size: 160,
            db_size: 40,
            num_queries: 8,
            d_in: 6,
            d_teacher: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
        .dataset
    }

    fn arch(d_in: usize, d_out: usize) -> Architecture {
        Architecture {
            d_in,
            hidden: vec![8],
            d_out,
        }
    }

    fn quick(kind: LossKind) -> TrainConfig {
        TrainConfig {
            epochs: Some(3),
            tuples_per_epoch: 30,
            patience: None,
            ..TrainConfig::published_default(kind)
        }
    }

    fn mining() -> MiningConfig {
        MiningConfig {
            pool_size: 80,
            ..Default::default()
        }
    }

    #[test]
    fn learning_rate_table() {
        let t = published_learning_rates();
        use SimilarityMode::*;
        assert_eq!(lookup_learning_rate(&t, LossKind::Contrastive, Symmetric).unwrap(), 1e-5);
        assert_eq!(lookup_learning_rate(&t, LossKind::Contrastive, Asymmetric).unwrap(), 1e-3);
        assert_eq!(lookup_learning_rate(&t, LossKind::Rkd, Symmetric).unwrap(), 1e-2);
        assert!(lookup_learning_rate(&[], LossKind::Rkd, Symmetric).is_err());
        for e in 0..300 {
            let want = 1e-3 * 0.99f64.powi(e as i32);
            assert!((learning_rate_at(1e-3, 0.99, e) - want).abs() <= 1e-12);
        }
        let cfg = TrainConfig::published_default(LossKind::Regression);
        assert_eq!(cfg.resolved_epochs().unwrap(), 300);
        let cfg = TrainConfig::published_default(LossKind::Rkd);
        assert_eq!(cfg.resolved_epochs().unwrap(), 100);
    }

    #[test]
    fn zero_rate_leaves_parameters_alone() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let teacher = TeacherModel::snapshot(&StudentModel::init(arch(6, 4), 2).unwrap(), &data.inputs).unwrap();
        for kind in LossKind::ALL {
            let mut cfg = quick(kind);
            cfg.learning_rates = vec![LearningRate {
                loss: kind,
                mode: None,
                lr: 0.0,
            }];
            let out = train(&data, &teacher, &student, &cfg, &mining()).unwrap();
            assert_eq!(out.best.theta(), student.theta(), "{kind}");
            assert_eq!(out.log.len(), 3);
        }
    }

    #[test]
    fn regression_on_own_snapshot_starts_at_minus_one() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let teacher = TeacherModel::snapshot(&student, &data.inputs).unwrap();
        let cfg = quick(LossKind::Regression);
        let env = Env {
            data: &data,
            teacher: &teacher,
            loss: cfg.loss.resolved().unwrap(),
        };
        let spec = TupleSpec {
            anchor: ExampleId(5),
            positives: vec![],
            negatives: vec![],
            unlabeled: vec![],
        };
        let (value, grad) = env.objective(&student, &spec, true).unwrap();
        assert!((value + 1.0).abs() < 1e-12);
        assert!(grad.unwrap().iter().all(|g| g.abs() < 1e-12));

        let split = split_validation(&data, &cfg, &mining()).unwrap();
        let score = validation_score(&student, &data, &teacher, &cfg.loss, &split.validation).unwrap();
        assert!((score + 1.0).abs() < 1e-12);
        let again = validation_score(&student, &data, &teacher, &cfg.loss, &split.validation).unwrap();
        assert_eq!(score.to_bits(), again.to_bits());

        let cfg = TrainConfig {
            epochs: Some(1),
            tuples_per_epoch: 10,
            ..cfg
        };
        let out = train(&data, &teacher, &student, &cfg, &mining()).unwrap();
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn weight_decay_step_scales_norm() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let teacher = TeacherModel::snapshot(&student, &data.inputs).unwrap();
        let env = Env {
            data: &data,
            teacher: &teacher,
            loss: LossConfig::published_default(LossKind::Regression),
        };
        let spec = TupleSpec {
            anchor: ExampleId(0),
            positives: vec![],
            negatives: vec![],
            unlabeled: vec![],
        };
        let g = env.objective(&student, &spec, true).unwrap().1.unwrap();
        let (lr, wd) = (0.5, 1e-2);
        let mut theta = student.theta().to_vec();
        sgd_step(&mut theta, &g, lr, wd);
        let want = (1.0 - lr * wd) * l2_norm(student.theta());
        assert!((l2_norm(&theta) - want).abs() < 1e-12);
        let mut exact = student.theta().to_vec();
        let zero = vec![0.0; exact.len()];
        sgd_step(&mut exact, &zero, lr, wd);
        assert!((l2_norm(&exact) - want).abs() < 1e-12);
    }

    #[test]
    fn training_log_is_reproducible() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let teacher = TeacherModel::snapshot(&StudentModel::init(arch(6, 4), 2).unwrap(), &data.inputs).unwrap();
        for kind in [LossKind::ContrastivePlus, LossKind::Rkd, LossKind::Triplet] {
            let mut cfg = quick(kind);
            cfg.learning_rates = vec![LearningRate {
                loss: kind,
                mode: None,
                lr: 1e-2,
            }];
            let a = parallel::with_threads(Some(1), || train(&data, &teacher, &student, &cfg, &mining()))
                .unwrap()
                .unwrap();
            let b = parallel::with_threads(Some(4), || train(&data, &teacher, &student, &cfg, &mining()))
                .unwrap()
                .unwrap();
            let bits = |o: &TrainOutcome| {
                o.log
                    .iter()
                    .flat_map(|r| [r.lr, r.train_loss, r.val_score, r.best_so_far])
                    .map(f64::to_bits)
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(a.best.theta(), b.best.theta());
            assert!(a.log.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
        }
    }

    #[test]
    fn keeps_the_earlier_model_when_validation_worsens() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let cfg = TrainConfig {
            epochs: Some(15),
            tuples_per_epoch: 100,
            learning_rates: vec![LearningRate {
                loss: LossKind::Regression,
                mode: None,
                lr: 0.05,
            }],
            ..quick(LossKind::Regression)
        };
        let split = split_validation(&data, &cfg, &mining()).unwrap();
        // Validation anchors get the negated target, so fitting the training
        // anchors moves them away from it.
        let target = StudentModel::init(arch(6, 4), 9).unwrap();
        let mut table = TeacherModel::snapshot(&target, &data.inputs).unwrap().table().clone();
        for spec in &split.validation {
            table.row_mut(spec.anchor.index()).iter_mut().for_each(|v| *v = -*v);
        }
        let teacher = TeacherModel::from_table(table).unwrap();
        let out = train(&data, &teacher, &student, &cfg, &mining()).unwrap();
        let first = out.log.first().unwrap();
        let last = out.log.last().unwrap();
        assert!(last.train_loss < first.train_loss);
        assert!(last.val_score > out.best_score);
        assert!(out.best_epoch < last.epoch);
        let refit = validation_score(&out.best, &data, &teacher, &cfg.loss, &split.validation).unwrap();
        assert_eq!(refit, out.best_score);
    }

    #[test]
    fn huge_rate_reports_divergence() {
        let data = small_data();
        let student = StudentModel::init(arch(6, 4), 1).unwrap();
        let teacher = TeacherModel::snapshot(&StudentModel::init(arch(6, 4), 2).unwrap(), &data.inputs).unwrap();
        let mut cfg = quick(LossKind::Contrastive);
        cfg.learning_rates = vec![LearningRate {
            loss: LossKind::Contrastive,
            mode: None,
            lr: 1e300,
        }];
        let err = train(&data, &teacher, &student, &cfg, &mining()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(matches!(err, Error::Diverged { .. }));
    }
}
