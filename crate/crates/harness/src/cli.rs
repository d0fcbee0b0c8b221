//! Command-line front end.
//!
//! Exit codes: `0` success, `1` a self-check or oracle disagreement failed
//! (or a runtime error occurred), `2` usage or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use betaat::attacks::{grid_oracle_batch, run_attack_batch, AttackError, AttackKind};
use betaat::data::Dataset;
use betaat::models::{Checkpoint, Model, ModelError};
use betaat::training::{
    evaluate_robust, select_checkpoints, train_with, Algorithm, TrainError, TrainOptions, EVAL_KEY_BASE,
};
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bench::{bench_attacks, bench_csv};
use crate::config::{ConfigError, RunConfig, Split};
use crate::datasets::{generate_dataset, train_test_split, DatasetError};
use crate::gradcheck::{gradcheck_csv, run_gradchecks};
use crate::report::{attack_text, eval_text, metrics_csv, metrics_json, write_text, AttackRow, EvalRow, Format, ReportError};
use crate::repro;

/// Largest accepted relative finite-difference error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot create {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Dataset(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "betaat", version, about = "Margin-based adversarial attacks and adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Attack steps for both training and evaluation.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write learning curves and best/last checkpoints.
    Train(RunArgs),
    /// Attack every sample of a split with one checkpoint.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "beta")]
        attack: AttackKind,
        /// Defaults to `checkpoint` in the config, then `<out>/last.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Clean and robust accuracy of checkpoints under every configured attack.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `best.json` and `last.json`; defaults to the output directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Evaluate a single checkpoint instead of a run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Exhaustive grid search, checking that a positive margin and
    /// misclassification coincide on every sample.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Grid half-width `r` (`2r+1` points per axis).
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum)]
        split: Option<Split>,
    },
    /// Finite-difference audit of all objectives.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `gradcheck.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Self-checking worked examples.
    Repro {
        #[command(subcommand)]
        which: ReproCommand,
    },
    Bench {
        #[command(subcommand)]
        which: BenchCommand,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum ReproCommand {
    /// Linear three-class counterexample.
    #[command(name = "appendix-d")]
    Counterexample,
    /// Ten-class ordering example.
    #[command(name = "example-1")]
    Ordering,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Attack wall-clock time per kind and step count.
    Attacks {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Loads the config named by `args` (or defaults) and applies overrides.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.train.attack.seed = s;
        cfg.eval.attack.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = args.algorithm {
        cfg.train.algorithm = a;
    }
    if let Some(e) = args.epsilon {
        cfg.train.attack.epsilon = e;
        cfg.eval.attack.epsilon = e;
    }
    if let Some(t) = args.steps {
        cfg.train.attack.steps = t;
        cfg.eval.attack.steps = t;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(f) = args.format {
        cfg.format = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train and test sets of a configuration.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let all = generate_dataset(&cfg.dataset)?;
    if all.dim() != cfg.train.model.input_dim || all.classes() != cfg.train.model.classes {
        return Err(ConfigError::Inconsistent(format!(
            "model expects d = {}, K = {} but the dataset has d = {}, K = {}",
            cfg.train.model.input_dim,
            cfg.train.model.classes,
            all.dim(),
            all.classes()
        ))
        .into());
    }
    Ok(train_test_split(&all, cfg.test_fraction, cfg.dataset.seed)?)
}

fn split_data(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    match split {
        Split::All => Ok(generate_dataset(&cfg.dataset)?),
        Split::Train => Ok(load_data(cfg)?.0),
        Split::Test => load_data(cfg)?
            .1
            .ok_or_else(|| CliError::Usage("test split is empty; set test_fraction > 0 or pick another split".into())),
    }
}

fn prepare_out(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let text = cfg.to_json();
    let _ = out.write_all(text.as_bytes());
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io { path: cfg.out_dir.clone(), source })?;
    write_text(&cfg.out_dir.join("config.json"), &text)?;
    Ok(())
}

fn checkpoint_path(explicit: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let path = explicit
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| cfg.out_dir.join("last.json"));
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(path)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Usage(e.to_string()))
}

fn report_path(cfg: &RunConfig, stem: &str) -> PathBuf {
    cfg.out_dir.join(format!("{stem}.{}", cfg.format.extension()))
}

fn cmd_train(args: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let (train, test) = load_data(&cfg)?;
    prepare_out(&cfg, out)?;
    let run = train_with(&train, &cfg.train, TrainOptions { test: test.as_ref(), ..TrainOptions::default() })?;
    let sel = select_checkpoints(&run.metrics, &run.checkpoints)?;
    write_text(&cfg.out_dir.join("metrics.csv"), &metrics_csv(&run.metrics))?;
    write_text(&cfg.out_dir.join("metrics.json"), &metrics_json(&run.metrics))?;
    sel.best.checkpoint.save(&cfg.out_dir.join("best.json"))?;
    sel.last.checkpoint.save(&cfg.out_dir.join("last.json"))?;
    let _ = writeln!(
        out,
        "trained {} for {} epochs; best epoch {}, last epoch {}; outputs in {}",
        cfg.train.algorithm.name(),
        cfg.train.epochs,
        sel.best.metrics.epoch,
        sel.last.metrics.epoch,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_attack(
    args: &RunArgs,
    kind: AttackKind,
    checkpoint: &Option<PathBuf>,
    split: Option<Split>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let path = checkpoint_path(checkpoint, &cfg)?;
    let ck = load_model(&path)?;
    let data = split_data(&cfg, split.unwrap_or(cfg.eval.split))?;
    prepare_out(&cfg, out)?;
    let keys: Vec<u64> = (0..data.len() as u64).map(|i| EVAL_KEY_BASE | i).collect();
    let res = run_attack_batch(
        kind,
        &ck.model,
        data.features(),
        data.labels(),
        &keys,
        &cfg.eval.attack,
        cfg.eval.grid_resolution,
    )?;
    let rows: Vec<AttackRow> = res
        .iter()
        .enumerate()
        .map(|(i, r)| AttackRow {
            index: i,
            label: data.labels()[i],
            j_star: r.j_star,
            margin: r.margin_value,
            success: r.success,
            eta: r.eta_star.data().to_vec(),
        })
        .collect();
    let path = report_path(&cfg, &format!("attack_{}", kind.name()));
    write_text(&path, &attack_text(&rows, cfg.format))?;
    let hits = rows.iter().filter(|r| r.success).count();
    let _ = writeln!(out, "{}: {hits}/{} samples misclassified; wrote {}", kind.name(), rows.len(), path.display());
    Ok(())
}

fn cmd_eval(
    args: &RunArgs,
    run_dir: &Option<PathBuf>,
    checkpoint: &Option<PathBuf>,
    split: Option<Split>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let named: Vec<(String, PathBuf)> = match checkpoint {
        Some(p) => vec![("checkpoint".into(), p.clone())],
        None => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            vec![("best".into(), dir.join("best.json")), ("last".into(), dir.join("last.json"))]
        }
    };
    let mut models = Vec::with_capacity(named.len());
    for (name, path) in &named {
        if !path.exists() {
            return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
        }
        models.push((name.clone(), load_model(path)?));
    }
    let data = split_data(&cfg, split.unwrap_or(cfg.eval.split))?;
    prepare_out(&cfg, out)?;
    let mut rows = Vec::new();
    for (name, ck) in &models {
        for &kind in &cfg.eval.attacks {
            let r = evaluate_robust(&ck.model, &data, kind, &cfg.eval.attack, cfg.eval.grid_resolution)?;
            rows.push(EvalRow {
                checkpoint: name.clone(),
                epoch: ck.meta.epoch,
                attack: kind.name().into(),
                clean: r.clean,
                robust: r.robust,
                samples: r.samples,
            });
        }
    }
    let path = report_path(&cfg, "eval");
    let text = eval_text(&rows, cfg.format);
    write_text(&path, &text)?;
    let _ = out.write_all(eval_text(&rows, Format::Csv).as_bytes());
    Ok(())
}

fn cmd_oracle(
    args: &RunArgs,
    checkpoint: &Option<PathBuf>,
    resolution: Option<usize>,
    split: Option<Split>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = resolve_config(args)?;
    let path = checkpoint_path(checkpoint, &cfg)?;
    let ck = load_model(&path)?;
    let data = split_data(&cfg, split.unwrap_or(cfg.eval.split))?;
    prepare_out(&cfg, out)?;
    let r = resolution.unwrap_or(cfg.eval.grid_resolution);
    let outcomes = grid_oracle_batch(&ck.model, data.features(), data.labels(), &cfg.eval.attack, r)?;
    let mut text = String::from("index,label,j_star,max_margin,misclassified,agree\n");
    let mut disagreements = 0;
    for (i, o) in outcomes.iter().enumerate() {
        let (j, m, _) = o.max_margin();
        // A positive margin forces an error; an error forces a non-negative margin.
        let agree = (m <= 0.0 || o.any_misclassified) && (!o.any_misclassified || m >= 0.0);
        disagreements += usize::from(!agree);
        text.push_str(&format!(
            "{i},{},{j},{:.6},{},{}\n",
            data.labels()[i],
            m,
            u8::from(o.any_misclassified),
            u8::from(agree)
        ));
    }
    let path = cfg.out_dir.join("oracle.csv");
    write_text(&path, &text)?;
    let _ = writeln!(
        out,
        "grid oracle ({} points per sample): {disagreements} disagreements over {} samples; wrote {}",
        outcomes.first().map_or(0, |o| o.grid.rows()),
        outcomes.len(),
        path.display()
    );
    if disagreements > 0 {
        return Err(CliError::Check(format!("{disagreements} samples where margin sign and error disagree")));
    }
    Ok(())
}

fn cmd_gradcheck(points: usize, seed: u64, dir: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let rows = run_gradchecks(points, seed).map_err(|e| CliError::Check(e.to_string()))?;
    let text = gradcheck_csv(&rows);
    let _ = out.write_all(text.as_bytes());
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|source| CliError::Io { path: d.clone(), source })?;
        write_text(&d.join("gradcheck.csv"), &text)?;
    }
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    if worst >= GRADCHECK_TOLERANCE {
        return Err(CliError::Check(format!("largest relative error {worst:.3e}")));
    }
    Ok(())
}

fn cmd_repro(which: ReproCommand, out: &mut dyn Write) -> Result<()> {
    let report = match which {
        ReproCommand::Counterexample => repro::linear_counterexample(),
        ReproCommand::Ordering => repro::ordering_example(),
    };
    let _ = out.write_all(report.render().as_bytes());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
        Err(CliError::Check(failed.join(", ")))
    }
}

fn cmd_bench(args: &RunArgs, checkpoint: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let model = match checkpoint.clone().or_else(|| cfg.checkpoint.clone()) {
        Some(p) => load_model(&p)?.model,
        None => Model::init(cfg.train.model.clone(), cfg.train.seed)?,
    };
    let data = split_data(&cfg, cfg.eval.split)?;
    prepare_out(&cfg, out)?;
    let rows = bench_attacks(&model, &data, &cfg.eval.attack, &cfg.bench.attacks, &cfg.bench.steps, cfg.bench.repeats)?;
    let text = bench_csv(&rows);
    write_text(&cfg.out_dir.join("bench.csv"), &text)?;
    let _ = out.write_all(text.as_bytes());
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Attack { run, attack, checkpoint, split } => cmd_attack(run, *attack, checkpoint, *split, out),
        Command::Eval { run, run_dir, checkpoint, split } => cmd_eval(run, run_dir, checkpoint, *split, out),
        Command::Oracle { run, checkpoint, resolution, split } => cmd_oracle(run, checkpoint, *resolution, *split, out),
        Command::Gradcheck { points, seed, out: dir } => cmd_gradcheck(*points, *seed, dir, out),
        Command::Repro { which } => cmd_repro(*which, out),
        Command::Bench { which: BenchCommand::Attacks { run, checkpoint } } => cmd_bench(run, checkpoint, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
