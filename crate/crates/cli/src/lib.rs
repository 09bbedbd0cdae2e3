//! Subcommands of the `dsmoe` experiment runner.
//!
//! Every command writes its artifacts under `--out` with fixed names and
//! finishes with `manifest.json` plus the resolved `config.toml`. Exit
//! status is 0 on success, 1 on contract or validation failure and 2 on
//! usage errors.

pub mod gradcheck;
pub mod manifest;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsmoe::data::{load_config, load_dir, synth_generate, write_dir, ExperimentConfig, SynthData};
use dsmoe::eval::{bs_similarity, evaluate, expert_activation_profile, grid_table, sweep, SweepSpec};
use dsmoe::model::{DsmoeModel, TeacherModel};
use dsmoe::numerics::BackwardFault;
use dsmoe::training::{fit, write_trace};
use dsmoe::{Error, Result};

use gradcheck::run_gradcheck;
use manifest::{write_atomic, RunManifest, CONFIG_FILE, MANIFEST_FILE};

pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TRACE_FILE: &str = "trace.ndjson";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const SWEEP_FILE: &str = "sweep.csv";

const AFTER_HELP: &str = "\
Artifacts (relative to --out):
  synth     train.csv test.csv items.csv schema.json
  train     student.ckpt [teacher.ckpt] trace.ndjson
  eval      report.json recall.csv activation.csv similarity.csv
  analyze   similarity.csv activation.csv
  gradcheck gradcheck.json
  sweep     sweep.csv cells/<axis>_<value>_seed<seed>/manifest.json
Every command also writes manifest.json and config.toml.

Exit status: 0 success, 1 contract or validation failure, 2 usage error.";

#[derive(Debug, Parser)]
#[command(name = "dsmoe", version, about = "Multi-scenario two-tower retrieval experiments", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-scenario dataset.
    Synth(SynthArgs),
    /// Train teacher and student, write checkpoints and the loss trace.
    Train(TrainArgs),
    /// Per-scenario Recall@K of a student checkpoint.
    Eval(EvalArgs),
    /// Scenario-bias similarity and expert activation of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Finite-difference gradient check on a tiny configuration.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a grid of expert counts or ranks.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML experiment configuration; the `[data]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Ablation {
    /// Freeze the scenario-aware adapters.
    Sap,
    /// Skip the teacher and set λ = 0.
    Distill,
    /// One normalization group shared by all scenarios.
    Dsbn,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ablated component; repeatable, each at most once.
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated cutoffs; overrides `eval.ks`.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradcheckSize {
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    Sigmoid,
    PreluSlope,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub size: GradcheckSize,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corrupts one backward rule to confirm the check notices.
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; generated from `[data]` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `experts=1..8`, `rank=1..16` or a comma list such as `rank=1,2,4`.
    #[arg(long)]
    pub grid: String,
    /// Seeds 0..n.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of a command, carrying its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Argument(_)) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn contract(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// exit status.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let rest: Vec<String> = args.into_iter().skip(1).collect();
    match run(cli.command, &rest) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(command: Command, args: &[String]) -> std::result::Result<(), Failure> {
    match command {
        Command::Synth(a) => cmd_synth(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Eval(a) => cmd_eval(&a, args),
        Command::Analyze(a) => cmd_analyze(&a, args),
        Command::Gradcheck(a) => cmd_gradcheck(&a, args),
        Command::Sweep(a) => cmd_sweep(&a, args),
    }
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish(mut manifest: RunManifest, started: Instant, out: &Path) -> Result<()> {
    manifest.duration_secs = started.elapsed().as_secs_f64();
    manifest.write(out)
}

pub fn cmd_synth(a: &SynthArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.data.seed = seed;
    }
    cfg.check()?;
    ensure_dir(&a.out)?;
    let data = synth_generate(&cfg.data)?;
    write_dir(&a.out, &data)?;
    let mut m = RunManifest::new("synth", args, &cfg, cfg.data.seed);
    for (name, file) in [
        ("train", dsmoe::data::TRAIN_FILE),
        ("test", dsmoe::data::TEST_FILE),
        ("items", dsmoe::data::CATALOG_FILE),
        ("schema", dsmoe::data::SCHEMA_FILE),
    ] {
        m.artifact(name, file);
    }
    println!(
        "wrote {} train and {} test interactions over {} items to {}",
        data.train.records.len(),
        data.test.records.len(),
        data.train.catalog.len(),
        a.out.display()
    );
    Ok(finish(m, started, &a.out)?)
}

/// Applies `--ablate` flags; each component may be named once.
pub fn apply_ablations(cfg: &mut ExperimentConfig, ablations: &[Ablation]) -> std::result::Result<(), Failure> {
    let mut seen = BTreeSet::new();
    for &ab in ablations {
        if !seen.insert(ab) {
            return Err(usage(format!("--ablate {ab:?} given more than once").to_lowercase()));
        }
        match ab {
            Ablation::Sap => cfg.model.use_sap = false,
            Ablation::Dsbn => cfg.model.use_dsbn = false,
            Ablation::Distill => {
                cfg.train.lambda = 0.0;
                cfg.train.distill = false;
            }
        }
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = base_config(a.config.as_deref())?;
    apply_ablations(&mut cfg, &a.ablate)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.check()?;
    let data = load_dir(&a.data)?;
    ensure_dir(&a.out)?;
    let fitted = fit(&cfg.model, &cfg.train, &data.train, &mut |r| {
        log::debug!("{:?} epoch {} batch {}: total {:.6}", r.phase, r.epoch, r.batch, r.total);
    })?;
    let mut m = RunManifest::new("train", args, &cfg, cfg.train.seed);
    fitted.student.save(&a.out.join(STUDENT_CHECKPOINT))?;
    m.artifact("student_checkpoint", STUDENT_CHECKPOINT);
    if let Some(t) = &fitted.teacher {
        t.save(&a.out.join(TEACHER_CHECKPOINT))?;
        m.artifact("teacher_checkpoint", TEACHER_CHECKPOINT);
    }
    let mut trace = Vec::new();
    write_trace(&mut trace, &fitted.report.trace)?;
    write_atomic(&a.out.join(TRACE_FILE), &trace)?;
    m.artifact("trace", TRACE_FILE);
    println!(
        "trained student ({} parameters) for {} epochs; final loss {:.6}",
        fitted.student.stats().param_count,
        cfg.train.epochs,
        fitted.report.final_loss(dsmoe::training::Phase::Student).unwrap_or(f64::NAN)
    );
    Ok(finish(m, started, &a.out)?)
}

fn load_checkpoint_and_data(checkpoint: &Path, data: &Path) -> Result<(DsmoeModel, SynthData)> {
    let data = load_dir(data)?;
    let model = DsmoeModel::load_for(checkpoint, &data.schema)?;
    Ok((model, data))
}

pub fn cmd_eval(a: &EvalArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(ks) = &a.k {
        cfg.eval.ks = ks.clone();
    }
    cfg.eval.check()?;
    let (model, data) = load_checkpoint_and_data(&a.checkpoint, &a.data)?;
    cfg.model = model.config.clone();
    let report = evaluate(&model, &data.train, &data.test, &cfg.eval)?;
    ensure_dir(&a.out)?;
    report.write(&a.out)?;
    let mut m = RunManifest::new("eval", args, &cfg, cfg.train.seed);
    for name in ["report.json", "recall.csv", "activation.csv", "similarity.csv"] {
        m.artifact(name.split('.').next().unwrap_or(name), name);
    }
    print!("{}", report.recall_table().to_csv_string());
    Ok(finish(m, started, &a.out)?)
}

pub fn cmd_analyze(a: &AnalyzeArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let (model, data) = load_checkpoint_and_data(&a.checkpoint, &a.data)?;
    let sim = bs_similarity(&model)?;
    let act = expert_activation_profile(&model, &data.train)?;
    ensure_dir(&a.out)?;
    grid_table(&sim, "scenario").write(&a.out.join("similarity.csv"))?;
    grid_table(&act, "expert").write(&a.out.join("activation.csv"))?;
    let cfg = ExperimentConfig {
        model: model.config.clone(),
        ..ExperimentConfig::default()
    };
    let mut m = RunManifest::new("analyze", args, &cfg, cfg.train.seed);
    m.artifact("similarity", "similarity.csv");
    m.artifact("activation", "activation.csv");
    Ok(finish(m, started, &a.out)?)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let GradcheckSize::Tiny = a.size;
    let fault = a.inject_fault.map(|f| match f {
        Fault::Sigmoid => BackwardFault::Sigmoid,
        Fault::PreluSlope => BackwardFault::PreluSlope,
    });
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let summary = run_gradcheck(&seeds, fault)?;
    for s in &summary.seeds {
        println!(
            "seed {}: student {:.3e} teacher {:.3e} ({} probes)",
            s.seed, s.student_max_rel_error, s.teacher_max_rel_error, s.probes
        );
    }
    println!("max relative error {:e}", summary.max_rel_error);
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let json = serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n";
        write_atomic(&out.join(GRADCHECK_FILE), json.as_bytes())?;
        let cfg = ExperimentConfig {
            model: gradcheck::tiny_config(),
            ..ExperimentConfig::default()
        };
        let mut m = RunManifest::new("gradcheck", args, &cfg, a.seed);
        m.artifact("gradcheck", GRADCHECK_FILE);
        finish(m, started, out)?;
    }
    if summary.passed {
        println!("PASS (tolerance {:e})", summary.tolerance);
        Ok(())
    } else {
        let lines: Vec<String> = summary
            .worst
            .iter()
            .map(|w| {
                format!(
                    "  {} {}[{}]: analytic {:e} numeric {:e} rel {:e}",
                    w.model, w.param, w.index, w.analytic, w.numeric, w.rel_error
                )
            })
            .collect();
        Err(contract(format!(
            "gradient check failed: max relative error {:e} >= {:e}\n{}",
            summary.max_rel_error,
            summary.tolerance,
            lines.join("\n")
        )))
    }
}

pub fn cmd_sweep(a: &SweepArgs, args: &[String]) -> std::result::Result<(), Failure> {
    let started = Instant::now();
    let cfg = base_config(a.config.as_deref())?;
    cfg.check()?;
    let spec = SweepSpec::parse(&a.grid, (0..a.seeds).collect())?;
    let data = match &a.data {
        Some(dir) => load_dir(dir)?,
        None => synth_generate(&cfg.data)?,
    };
    ensure_dir(&a.out)?;
    let out = a.out.clone();
    let mut cell_error: Option<Error> = None;
    let (table, cells) = sweep(&cfg, &data, &spec, &mut |cell| {
        let rel = format!("cells/{}_{}_seed{}", cell.axis, cell.value, cell.seed);
        let dir = out.join(&rel);
        let mut m = RunManifest::new("sweep-cell", args, &cell.config, cell.seed);
        m.artifact("table", &format!("../../{SWEEP_FILE}"));
        let written = ensure_dir(&dir).and_then(|_| m.write(&dir));
        if let Err(e) = written {
            cell_error.get_or_insert(e);
        }
        match &cell.outcome {
            Ok(r) => println!(
                "{}={} seed {}: tail recall@{} {}",
                cell.axis,
                cell.value,
                cell.seed,
                r.ks[0],
                r.scenarios.last().and_then(|s| s.recall[0]).map_or("NA".into(), |v| format!("{v:.4}"))
            ),
            Err(msg) => println!("{}={} seed {}: failed: {msg}", cell.axis, cell.value, cell.seed),
        }
    })?;
    if let Some(e) = cell_error {
        return Err(e.into());
    }
    table.write(&a.out.join(SWEEP_FILE))?;
    let mut m = RunManifest::new("sweep", args, &cfg, 0);
    m.artifact("table", SWEEP_FILE);
    finish(m, started, &a.out)?;
    if cells.iter().all(|c| c.outcome.is_err()) {
        return Err(contract("every sweep cell failed"));
    }
    Ok(())
}

/// Manifest of a finished run in `dir`.
pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    RunManifest::read(&dir.join(MANIFEST_FILE))
}

/// Path of the resolved configuration written next to a manifest.
pub fn config_path(dir: &Path) -> PathBuf {
    dir.join(CONFIG_FILE)
}

/// Loads a teacher checkpoint written by `train`.
pub fn load_teacher(dir: &Path) -> Result<TeacherModel> {
    TeacherModel::load(&dir.join(TEACHER_CHECKPOINT))
}
