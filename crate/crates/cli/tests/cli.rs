//! End-to-end runs of the `dsmoe` binary on a small configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dsmoe::data::{load_dir, read_table};
use dsmoe::features::Side;
use dsmoe::model::DsmoeModel;
use dsmoe_cli::read_manifest;

const SMALL: &str = r#"
[data]
n_users = 30
n_items = 120
interactions_total = 1200
n_categories = 6
embedding_dim = 4
seed = 3

[model]
experts = 2
rank = 2
d_hidden = 8
d_match = 4
teacher_hidden = [8]

[train]
epochs = 2
batch_size = 128
learning_rate = 0.01

[eval]
ks = [10, 20]
"#;

fn dsmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsmoe")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    assert_ok(&dsmoe(&["synth", "--config", p(&config), "--out", p(&data)]));
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> (PathBuf, Output) {
    let out = f.root.join(name);
    let mut args = vec!["train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = dsmoe(&args);
    (out, o)
}

#[test]
fn synth_default_mix_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    assert_ok(&dsmoe(&["synth", "--out", p(&a)]));
    assert_ok(&dsmoe(&["synth", "--out", p(&b)]));
    for file in ["train.csv", "test.csv", "items.csv", "schema.json", "config.toml"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let data = load_dir(&a).unwrap();
    assert_eq!(data.schema.scenario_cardinality, 4);
    assert_eq!(data.train.catalog.len(), 5000);
    let mut counts = data.train.scenario_counts();
    for (c, t) in counts.iter_mut().zip(data.test.scenario_counts()) {
        *c += t;
    }
    let total: usize = counts.iter().sum();
    assert_eq!(total, 50_000);
    for (c, p) in counts.iter().zip([0.84, 0.09, 0.04, 0.03]) {
        let sd = (total as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - total as f64 * p).abs() < 4.0 * sd, "{counts:?}");
    }
    let m = read_manifest(&a).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seed, 0);
    assert_eq!(m.artifacts["train"], "train.csv");
}

#[test]
fn synth_reports_uncreatable_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = dsmoe(&["synth", "--out", p(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_reloadable_checkpoints() {
    let f = fixture();
    let (out, o) = train(&f, "run", &[]);
    assert_ok(&o);
    for file in ["student.ckpt", "teacher.ckpt", "trace.ndjson", "manifest.json", "config.toml"] {
        assert!(out.join(file).exists(), "{file}");
    }
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.config.train.lambda, 1.0);
    assert!(m.artifacts.contains_key("teacher_checkpoint"));

    let data = load_dir(&f.data).unwrap();
    let model = DsmoeModel::load_for(&out.join("student.ckpt"), &data.schema).unwrap();
    let again = DsmoeModel::load(&out.join("student.ckpt")).unwrap();
    let refs: Vec<_> = data.test.records.iter().take(50).collect();
    for side in [Side::User, Side::Item] {
        let a = model.encode_batch(&refs, side).unwrap();
        let b = again.encode_batch(&refs, side).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn distill_ablation_skips_teacher() {
    let f = fixture();
    let (out, o) = train(&f, "nodistill", &["--ablate", "distill", "--ablate", "sap"]);
    assert_ok(&o);
    assert!(!out.join("teacher.ckpt").exists());
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.config.train.lambda, 0.0);
    assert!(!m.config.train.distill);
    assert!(!m.config.model.use_sap);
    assert!(!m.artifacts.contains_key("teacher_checkpoint"));
}

#[test]
fn duplicate_ablation_is_a_usage_error() {
    let f = fixture();
    let (_, o) = train(&f, "dup", &["--ablate", "sap", "--ablate", "sap"]);
    assert_eq!(o.status.code(), Some(2));
    let (_, o) = train(&f, "bad", &["--ablate", "experts"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn replay_from_manifest_is_byte_identical() {
    let f = fixture();
    let (first, o) = train(&f, "first", &["--seed", "4"]);
    assert_ok(&o);
    let m = read_manifest(&first).unwrap();
    assert_eq!(m.seed, 4);
    let second = f.root.join("second");
    let cfg = dsmoe_cli::config_path(&first);
    assert_ok(&dsmoe(&["train", "--config", p(&cfg), "--data", p(&f.data), "--out", p(&second)]));
    for file in ["student.ckpt", "teacher.ckpt", "trace.ndjson", "config.toml"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn eval_reports_requested_cutoffs() {
    let f = fixture();
    let (run, o) = train(&f, "run", &[]);
    assert_ok(&o);
    let ckpt = run.join("student.ckpt");
    let e1 = f.root.join("e1");
    let e2 = f.root.join("e2");
    for out in [&e1, &e2] {
        assert_ok(&dsmoe(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(out), "--k", "50,100"]));
    }
    let t = read_table(&e1.join("recall.csv")).unwrap();
    assert!(t.column("recall@50").is_some() && t.column("recall@100").is_some());
    assert_eq!(t.rows.len(), 4);
    for file in ["report.json", "recall.csv", "activation.csv", "similarity.csv"] {
        assert_eq!(fs::read(e1.join(file)).unwrap(), fs::read(e2.join(file)).unwrap(), "{file}");
    }
    let o = dsmoe(&["eval", "--checkpoint", p(&ckpt), "--data", p(&f.data), "--out", p(&e1), "--k", "121"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_refuses_mismatched_schema() {
    let f = fixture();
    let (run, o) = train(&f, "run", &[]);
    assert_ok(&o);
    let other = f.root.join("other");
    let cfg = f.root.join("other.toml");
    fs::write(&cfg, SMALL.replace("n_items = 120", "n_items = 130")).unwrap();
    assert_ok(&dsmoe(&["synth", "--config", p(&cfg), "--out", p(&other)]));
    let o = dsmoe(&[
        "eval",
        "--checkpoint",
        p(&run.join("student.ckpt")),
        "--data",
        p(&other),
        "--out",
        p(&f.root.join("e")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let stored = dsmoe::data::load_schema(&f.data.join("schema.json")).unwrap().fingerprint();
    let given = dsmoe::data::load_schema(&other.join("schema.json")).unwrap().fingerprint();
    assert!(err.contains(&stored) && err.contains(&given), "{err}");
}

#[test]
fn analyze_writes_both_tables() {
    let f = fixture();
    let (run, o) = train(&f, "run", &[]);
    assert_ok(&o);
    let out = f.root.join("an");
    assert_ok(&dsmoe(&["analyze", "--checkpoint", p(&run.join("student.ckpt")), "--data", p(&f.data), "--out", p(&out)]));
    let sim = read_table(&out.join("similarity.csv")).unwrap();
    assert_eq!(sim.rows.len(), 4);
    for (i, row) in sim.rows.iter().enumerate() {
        assert_eq!(row[i + 1].parse::<f64>().unwrap(), 1.0);
    }
    let act = read_table(&out.join("activation.csv")).unwrap();
    for row in &act.rows {
        let sum: f64 = row[1..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(&dsmoe(&["gradcheck", "--size", "tiny", "--out", p(&a)]));
    assert_ok(&dsmoe(&["gradcheck", "--size", "tiny", "--out", p(&b)]));
    assert_eq!(fs::read(a.join("gradcheck.json")).unwrap(), fs::read(b.join("gradcheck.json")).unwrap());
    for fault in ["sigmoid", "prelu-slope"] {
        let o = dsmoe(&["gradcheck", "--seeds", "1", "--inject-fault", fault]);
        assert_eq!(o.status.code(), Some(1), "{fault}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("failed"));
    }
}

#[test]
fn sweep_writes_table_and_cell_manifests() {
    let f = fixture();
    let out = f.root.join("sweep");
    let o = dsmoe(&[
        "sweep",
        "--config",
        p(&f.config),
        "--data",
        p(&f.data),
        "--grid",
        "experts=1..2",
        "--seeds",
        "2",
        "--out",
        p(&out),
    ]);
    assert_ok(&o);
    let t = read_table(&out.join("sweep.csv")).unwrap();
    // experts × seeds × scenarios × ks
    assert_eq!(t.rows.len(), 2 * 2 * 4 * 2);
    for cell in ["experts_1_seed0", "experts_2_seed1"] {
        let m = read_manifest(&out.join("cells").join(cell)).unwrap();
        assert_eq!(m.command, "sweep-cell");
    }
    let m = read_manifest(&out.join("cells/experts_2_seed1")).unwrap();
    assert_eq!(m.config.model.experts, 2);
    assert_eq!(m.config.train.seed, 1);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(dsmoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dsmoe(&["train"]).status.code(), Some(2));
    assert_eq!(dsmoe(&["sweep", "--grid", "depth=1..2", "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(dsmoe(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = -1.0\n").unwrap();
    let o = dsmoe(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.learning_rate"));
}
