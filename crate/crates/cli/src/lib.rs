//! Command-line front end: generate data, train, evaluate, preview mining
//! and run ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use asym_metric::dataset::ExampleId;
use asym_metric::evaluation::{self, Protocol, WhiteningTransform};
use asym_metric::experiment::{self as exp, ConfigFile, Experiment, Prepared};
use asym_metric::geometry::SimilarityMode;
use asym_metric::losses::LossKind;
use asym_metric::mining::{self, MiningContext};
use asym_metric::models::{self, EmbeddingCache, StudentModel};
use asym_metric::trainer::{self, TrainObserver};
use asym_metric::{parallel, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "asym-metric", version, about = "Asymmetric metric learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config with `defaults` and `overrides` layers. Without it the
    /// built-in desk-scale settings are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (data, checkpoints, logs, results).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Run on a single thread.
    #[arg(long)]
    pub strict_determinism: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and teacher.
    GenData(Common),
    /// Train a student on generated data.
    Train(Common),
    /// Evaluate a checkpoint and append to results.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// sym or asym; all configured protocols when omitted.
        #[arg(long)]
        protocol: Option<String>,
        /// Checkpoint directory; defaults to <out>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the teacher in place of a student.
        #[arg(long)]
        teacher_as_student: bool,
        /// Use a saved whitening instead of fitting one.
        #[arg(long)]
        whitening: Option<PathBuf>,
    },
    /// Dump the hard negatives mined for one anchor at every epoch.
    MinePreview {
        #[command(flatten)]
        common: Common,
        /// Anchor id; defaults to the first training example with positives.
        #[arg(long)]
        anchor: Option<u32>,
    },
    /// Train and evaluate every row of a sweep file.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Train(c) => c,
            Command::Eval { common, .. } | Command::MinePreview { common, .. } | Command::Ablate { common, .. } => common,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let threads = if common.strict_determinism {
        Some(1)
    } else {
        common.threads
    };
    if threads == Some(0) {
        return Err(Error::Config("--threads must be positive".into()));
    }
    parallel::with_threads(threads, || match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            protocol,
            checkpoint,
            teacher_as_student,
            whitening,
        } => eval(common, protocol.as_deref(), checkpoint.as_deref(), *teacher_as_student, whitening.as_deref()),
        Command::MinePreview { common, anchor } => mine_preview(common, *anchor),
        Command::Ablate { common, sweep } => ablate(common, sweep),
    })?
}

fn config_file(common: &Common) -> Result<ConfigFile> {
    match &common.config {
        Some(path) => ConfigFile::load(path),
        None => Ok(ConfigFile::desk()),
    }
}

fn flag_layer(common: &Common) -> Value {
    let mut layer = json!({});
    if let Some(seed) = common.seed {
        layer["seed"] = json!(seed);
    }
    if let Some(out) = &common.out {
        layer["output_dir"] = json!(out);
    }
    layer
}

fn resolve(common: &Common, extra: &[Value]) -> Result<(ConfigFile, Experiment)> {
    let file = config_file(common)?;
    let mut layers = vec![flag_layer(common)];
    layers.extend_from_slice(extra);
    let experiment = file.resolve_with(&layers)?;
    log::info!("config digest {}", experiment.digest()?);
    Ok((file, experiment))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(common: &Common) -> Result<()> {
    let (_, e) = resolve(common, &[])?;
    let p = exp::generate(&e)?;
    let dir = e.data_dir();
    exp::save_prepared(&p, &dir)?;
    write(
        &e.output_dir.join(exp::RESOLVED_CONFIG_FILE),
        serde_json::to_vec_pretty(&e)?,
    )?;
    let c = &e.dataset;
    println!(
        "wrote {}: {} train, {} database, {} queries per tier ({} tiers), {} classes, d_in {}, d_teacher {}, seed {}",
        dir.display(),
        c.train_size,
        c.db_size,
        c.num_queries,
        p.data.tasks.len(),
        c.num_classes,
        c.d_in,
        c.d_teacher,
        e.seed
    );
    println!("config digest {}", e.digest()?);
    Ok(())
}

struct CheckpointWriter {
    dir: PathBuf,
    seed: u64,
}

impl TrainObserver for CheckpointWriter {
    fn best_updated(&mut self, epoch: usize, student: &StudentModel) -> Result<()> {
        models::save_checkpoint(&self.dir, student, self.seed, epoch)
    }
}

fn train(common: &Common) -> Result<()> {
    let (_, e) = resolve(common, &[])?;
    let p = exp::load_prepared(&e.data_dir())?;
    let init = exp::initial_student(&e)?;
    let out = &e.output_dir;
    models::save_checkpoint(&out.join(exp::INIT_CHECKPOINT_DIR), &init, e.student_seed(), 0)?;
    let ckpt = out.join(exp::CHECKPOINT_DIR);
    let mut writer = CheckpointWriter {
        dir: ckpt.clone(),
        seed: e.student_seed(),
    };
    let outcome = trainer::train_with_observer(&p.data, &p.teacher, &init, &e.train, &e.mining, &mut writer)?;
    models::save_checkpoint(&ckpt, &outcome.best, e.student_seed(), outcome.best_epoch)?;
    trainer::write_log(&out.join(exp::TRAIN_LOG_FILE), &outcome.log)?;
    write(&out.join(exp::RESOLVED_CONFIG_FILE), serde_json::to_vec_pretty(&e)?)?;
    println!(
        "trained {} ({}) for {} epochs; best epoch {}, validation score {:.6}",
        e.train.loss.kind,
        e.train.loss.resolved()?.mode,
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_score
    );
    println!("config digest {}", e.digest()?);
    Ok(())
}

fn eval(
    common: &Common,
    protocol: Option<&str>,
    checkpoint: Option<&Path>,
    teacher_as_student: bool,
    whitening: Option<&Path>,
) -> Result<()> {
    let (_, e) = resolve(common, &[])?;
    let protocols = match protocol {
        Some(s) => vec![s.parse::<Protocol>()?],
        None => e.protocols.clone(),
    };
    let given = whitening.map(WhiteningTransform::load).transpose()?;
    let p = exp::load_prepared(&e.data_dir())?;
    let cache;
    let student: &(dyn asym_metric::geometry::EmbeddingSource + Sync) = if teacher_as_student {
        &p.teacher
    } else {
        let dir = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| e.output_dir.join(exp::CHECKPOINT_DIR));
        let (model, _) = models::load_checkpoint(&dir)?;
        cache = exp::embed_all(&model, &p.data)?;
        &cache
    };
    let mut rows = Vec::new();
    for protocol in protocols {
        let fitted;
        let w = match &given {
            Some(w) => Some(w),
            None if e.whitening => {
                fitted = exp::fit_protocol_whitening(protocol, student, &p)?;
                fitted.save(&e.output_dir.join(format!("whitening_{protocol}.json")))?;
                Some(&fitted)
            }
            None => None,
        };
        let reports = exp::evaluate_with(&e, &p, student, protocol, w)?;
        write(
            &e.output_dir.join(format!("eval_{protocol}.json")),
            serde_json::to_vec_pretty(&reports)?,
        )?;
        for r in &reports {
            println!("{protocol} {}: mAP {:.4} mP@10 {:.4}", r.tier, r.map, r.mp10);
        }
        let mut new_rows = exp::results_rows(&e, &reports, evaluation::unix_timestamp());
        if teacher_as_student {
            for r in &mut new_rows {
                r.loss = "teacher".into();
                r.mode = "-".into();
            }
        }
        rows.extend(new_rows);
    }
    evaluation::append_results(&e.output_dir.join(exp::RESULTS_FILE), &rows)
}

struct MinePreview<'a> {
    anchor: ExampleId,
    e: &'a Experiment,
    p: &'a Prepared,
    mode: SimilarityMode,
    csv: String,
}

impl TrainObserver for MinePreview<'_> {
    fn epoch_start(&mut self, epoch: usize, student: &StudentModel, pool: &[ExampleId]) -> Result<()> {
        let mut ids = vec![self.anchor];
        if self.mode == SimilarityMode::Symmetric {
            ids.extend_from_slice(pool);
        }
        let cache = EmbeddingCache::compute(student, &self.p.data.inputs, &ids)?;
        let ctx = MiningContext {
            student: &cache,
            teacher: &self.p.teacher,
            train: &self.p.data.train,
            classes: self.e.mining.exclude_same_class.then_some(self.p.data.classes.as_slice()),
        };
        let mined = mining::mine_for_anchor(self.anchor, pool, self.mode, &self.e.mining, &ctx)?;
        for (rank, m) in mined.iter().enumerate() {
            writeln!(self.csv, "{epoch},{},{},{:.6}", rank + 1, m.id, m.similarity).unwrap();
        }
        Ok(())
    }
}

fn mine_preview(common: &Common, anchor: Option<u32>) -> Result<()> {
    let (_, e) = resolve(common, &[])?;
    if !e.train.loss.kind.uses_labels() {
        return Err(Error::Config(format!("{} does not mine negatives", e.train.loss.kind)));
    }
    let p = exp::load_prepared(&e.data_dir())?;
    let anchor = match anchor {
        Some(a) => {
            let a = ExampleId(a);
            if !p.data.train.contains(a) {
                return Err(Error::UnknownId(a));
            }
            a
        }
        None => *p
            .data
            .train
            .ids()
            .iter()
            .find(|a| !p.data.train.positives(**a).is_empty())
            .ok_or_else(|| Error::Config("no training anchor has positives".into()))?,
    };
    let mut preview = MinePreview {
        anchor,
        e: &e,
        p: &p,
        mode: e.train.loss.resolved()?.mode,
        csv: String::from("epoch,rank,id,similarity\n"),
    };
    let init = exp::initial_student(&e)?;
    trainer::train_with_observer(&p.data, &p.teacher, &init, &e.train, &e.mining, &mut preview)?;
    let path = e.output_dir.join(format!("mine_preview_{anchor}.csv"));
    write(&path, &preview.csv)?;
    println!("anchor {anchor}: wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub name: String,
    #[serde(default)]
    pub overrides: Value,
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "name,loss,mode,self,pos,neg,sym_mAP,asym_mAP,sym_mP@10,asym_mP@10,status";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn flags(e: &Experiment) -> (bool, bool, bool) {
    match e.train.loss.resolved() {
        Ok(l) if matches!(l.kind, LossKind::Contrastive) => {
            (l.include_self_positive, l.use_positives, l.use_negatives)
        }
        Ok(l) if l.kind == LossKind::Regression => (true, false, false),
        Ok(l) => (false, l.kind.uses_labels(), l.kind.uses_labels()),
        Err(_) => (false, false, false),
    }
}

fn ablation_row(common: &Common, row: &SweepRow, base: &Experiment, shared: &Prepared) -> Result<String> {
    let (_, e) = resolve(common, std::slice::from_ref(&row.overrides))?;
    let own;
    let p = if e.dataset == base.dataset && e.teacher == base.teacher {
        shared
    } else {
        own = exp::generate(&e)?;
        &own
    };
    let (s, pos, neg) = flags(&e);
    let mut line = format!(
        "{},{},{},{},{},{}",
        csv_field(&row.name),
        e.train.loss.kind,
        e.train.loss.resolved()?.mode,
        s as u8,
        pos as u8,
        neg as u8
    );
    let e = Experiment {
        protocols: vec![Protocol::Symmetric, Protocol::Asymmetric],
        ..e
    };
    match exp::run(&e, p) {
        Ok(r) => {
            let get = |protocol, f: fn(&evaluation::EvalReport) -> f64| {
                r.reports
                    .iter()
                    .find(|x| x.protocol == protocol && x.tier == "medium")
                    .map(|x| format!("{:.4}", f(x)))
                    .unwrap_or_default()
            };
            write!(
                line,
                ",{},{},{},{},ok",
                get(Protocol::Symmetric, |x| x.map),
                get(Protocol::Asymmetric, |x| x.map),
                get(Protocol::Symmetric, |x| x.mp10),
                get(Protocol::Asymmetric, |x| x.mp10)
            )
            .unwrap();
        }
        Err(err) => {
            log::warn!("sweep row '{}' failed: {err}", row.name);
            let status = if err.is_numerical() { "diverged" } else { "failed" };
            write!(line, ",,,,,{}", csv_field(&format!("{status}: {err}"))).unwrap();
        }
    }
    Ok(line)
}

fn ablate(common: &Common, sweep_path: &Path) -> Result<()> {
    let text = fs::read_to_string(sweep_path).map_err(|e| Error::Io {
        path: sweep_path.to_path_buf(),
        source: e,
    })?;
    let sweep: Sweep = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: sweep_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (_, base) = resolve(common, &[])?;
    create_dir(&base.output_dir)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    if !sweep.rows.is_empty() {
        let shared = exp::generate(&base)?;
        for row in &sweep.rows {
            let line = match ablation_row(common, row, &base, &shared) {
                Ok(line) => line,
                Err(err) => format!(
                    "{},,,,,,,,,,{}",
                    csv_field(&row.name),
                    csv_field(&format!("failed: {err}"))
                ),
            };
            println!("{line}");
            csv.push_str(&line);
            csv.push('\n');
        }
    }
    let path = base.output_dir.join(ABLATION_FILE);
    write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}
