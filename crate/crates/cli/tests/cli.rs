use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_asym-metric"));
    c.env("RUST_LOG", "warn");
    c
}

fn small(overrides: Value) -> Value {
    let mut base = json!({
        "overrides": {
            "dataset": {"num_classes": 8, "train_size": 160, "db_size": 40, "num_queries": 8, "d_in": 8, "d_teacher": 8},
            "student": {"hidden": [16]},
            "mining": {"pool_size": 80},
            "train": {"tuples_per_epoch": 40, "epochs": 4}
        }
    });
    merge(&mut base["overrides"], &overrides);
    base
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    fs::read(path).unwrap()
}

#[test]
fn gen_data_writes_identical_files_for_equal_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(&run(&["gen-data"], &cfg, &a));
    assert!(stdout.contains("160 train"));
    ok(&run(&["gen-data"], &cfg, &b));
    for f in ["meta.json", "inputs.f32", "pairs.json", "teacher.f32"] {
        assert_eq!(read(a.join("data").join(f)), read(b.join("data").join(f)), "{f}");
    }
}

#[test]
fn infeasible_sizes_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({"dataset": {"train_size": 10}})));
    let o = run(&["gen-data"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 * num_classes"));
}

#[test]
fn zero_rate_keeps_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &small(json!({"train": {"learning_rates": [{"loss": "contrastive_plus", "lr": 0.0}]}})),
    );
    ok(&run(&["gen-data"], &cfg, tmp.path()));
    ok(&run(&["train"], &cfg, tmp.path()));
    assert_eq!(
        read(tmp.path().join("checkpoint/theta.f32")),
        read(tmp.path().join("checkpoint_init/theta.f32"))
    );
}

#[test]
fn regression_training_log_keeps_best_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &small(json!({"train": {"loss": {"kind": "regression"}, "epochs": 8}})),
    );
    ok(&run(&["gen-data"], &cfg, tmp.path()));
    let stdout = ok(&run(&["train"], &cfg, tmp.path()));
    assert!(stdout.contains("validation score"));
    let log = String::from_utf8(read(tmp.path().join("train_log.csv"))).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_loss,val_score,best_so_far"));
    let best: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(best.len(), 8);
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn missing_teacher_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    ok(&run(&["gen-data"], &cfg, tmp.path()));
    fs::remove_file(tmp.path().join("data/teacher.f32")).unwrap();
    assert_eq!(run(&["train"], &cfg, tmp.path()).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &small(json!({"train": {"learning_rates": [{"loss": "contrastive_plus", "lr": 1e300}]}})),
    );
    ok(&run(&["gen-data"], &cfg, tmp.path()));
    let o = run(&["train"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epoch") && err.contains("batch"), "{err}");
}

fn stable_rows(path: &Path) -> Vec<String> {
    String::from_utf8(read(path))
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l[..l.rfind(',').unwrap()].to_string())
        .collect()
}

#[test]
fn eval_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    let out = tmp.path();
    ok(&run(&["gen-data"], &cfg, out));

    let teacher = ok(&run(&["eval", "--teacher-as-student"], &cfg, out));
    let maps: Vec<&str> = teacher.lines().map(|l| l.split(": ").nth(1).unwrap()).collect();
    assert_eq!(maps.len(), 4);
    assert_eq!(maps[0], maps[2]);
    assert_eq!(maps[1], maps[3]);

    ok(&run(&["train"], &cfg, out));
    fs::remove_file(out.join("results.csv")).unwrap();
    ok(&run(&["eval", "--protocol", "asym"], &cfg, out));
    ok(&run(&["eval", "--protocol", "asym"], &cfg, out));
    let rows = stable_rows(&out.join("results.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[..2], rows[2..]);

    assert_eq!(run(&["eval", "--protocol", "diagonal"], &cfg, out).status.code(), Some(2));
    let w = out.join("whitening_asymmetric.json");
    assert!(w.exists());
    let o = run(&["eval", "--protocol", "sym", "--whitening", w.to_str().unwrap()], &cfg, out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mine_preview_lists_k_per_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    ok(&run(&["gen-data"], &cfg, tmp.path()));
    ok(&run(&["mine-preview", "--anchor", "3"], &cfg, tmp.path()));
    let csv = String::from_utf8(read(tmp.path().join("mine_preview_3.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,rank,id,similarity");
    assert_eq!(lines.len(), 1 + 4 * 5);
    assert!(lines[1].starts_with("0,1,"));
    let o = run(&["mine-preview", "--anchor", "100000"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

fn ablate(tmp: &Path, cfg: &Path, sweep: &Value) -> (Output, String) {
    let path = write_config(tmp, "sweep.json", sweep);
    let o = bin()
        .args(["ablate", "--sweep", path.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out"])
        .arg(tmp)
        .output()
        .unwrap();
    let csv = fs::read_to_string(tmp.join("ablation.csv")).unwrap_or_default();
    (o, csv)
}

#[test]
fn ablation_table_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    let table1: Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/table1_sweep.json")).unwrap())
            .unwrap();
    let (o, csv) = ablate(tmp.path(), &cfg, &table1);
    ok(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].contains("sym_mAP") && lines[0].contains("asym_mAP"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")), "{csv}");
    assert!(lines[5].starts_with("regression,regression,asymmetric,1,0,0,"));

    let (o, csv) = ablate(tmp.path(), &cfg, &json!({"rows": []}));
    ok(&o);
    assert_eq!(csv.lines().count(), 1);

    let sweep = json!({"rows": [
        {"name": "fine", "overrides": {"train": {"loss": {"kind": "regression"}}}},
        {"name": "blows up", "overrides": {"train": {"learning_rates": [{"loss": "contrastive_plus", "lr": 1e300}]}}},
        {"name": "also fine", "overrides": {}}
    ]});
    let (o, csv) = ablate(tmp.path(), &cfg, &sweep);
    ok(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with(",ok"));
    assert!(lines[2].contains("diverged"), "{}", lines[2]);
    assert!(lines[3].ends_with(",ok"));
}

#[test]
fn strict_pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small(json!({})));
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        for step in [&["gen-data"][..], &["train"], &["eval"]] {
            let mut args = step.to_vec();
            args.push("--strict-determinism");
            ok(&run(&args, &cfg, &out));
        }
        runs.push(out);
    }
    for f in ["checkpoint/theta.f32", "checkpoint/student.json", "train_log.csv"] {
        assert_eq!(read(runs[0].join(f)), read(runs[1].join(f)), "{f}");
    }
    assert_eq!(
        stable_rows(&runs[0].join("results.csv")),
        stable_rows(&runs[1].join("results.csv"))
    );
}
