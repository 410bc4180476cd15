//! Command-line surface: `gendata`, `train`, `eval`, `gradcheck` and `sweep`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error. Failures print
//! one line to stderr: `error kind=<kind> code=<code> message=<json string>`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{mean_by_value, run_sweep, write_table};
use crate::checkpoint;
use crate::config::{self, RunConfig, SweepConfig};
use crate::episodes::{generate_synthetic, load_dataset, save_dataset, EpisodeShape, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::gradcheck::{self, Problem};
use crate::seeding;
use crate::tensor::blob::Precision;
use crate::training::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "espt", version, about = "Few-shot classification by spatial feature reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural shape×texture dataset.
    Gendata(GendataArgs),
    /// Episodic training; writes checkpoints and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on random episodes.
    Eval(EvalArgs),
    /// Finite-difference check of every gradient on a toy episode.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate across an α or transform-set axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GendataArgs {
    /// TOML file with num_classes, samples_per_class, image_side, seed and optional split.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    side: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Class counts `train,val,test`.
    #[arg(long, value_parser = parse_triple)]
    split: Option<[usize; 3]>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory or manifest.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config supplying dataset, λ̄ and eval defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (overrides the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    /// Episode shape `n,k,l`.
    #[arg(long)]
    shape: Option<EpisodeShape>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_bar: Option<f64>,
    /// Directory for `eval_report.json` and `eval_results.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(|e| e.to_string())?;
    v.try_into().map_err(|_| format!("expected three comma-separated counts, got {s:?}"))
}

/// Parse `argv` (including the program name), run the subcommand and return the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
                    report_error("usage", EXIT_USAGE, &first);
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Gendata(a) => gendata(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = if e.is_usage() { EXIT_USAGE } else { EXIT_FAILURE };
            report_error(e.kind(), code, &e.to_string());
            code
        }
    }
}

fn report_error(kind: &str, code: i32, message: &str) {
    let msg = serde_json::to_string(message).unwrap_or_else(|_| "\"\"".into());
    eprintln!("error kind={kind} code={code} message={msg}");
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gendata(a: GendataArgs) -> Result<i32> {
    let spec = match &a.spec {
        Some(path) => config::parse_file::<SyntheticSpec>(path)?,
        None => SyntheticSpec {
            num_classes: a.classes,
            samples_per_class: a.samples,
            image_side: a.side,
            seed: a.seed,
            split: a.split,
        },
    };
    let data = generate_synthetic(&spec)?;
    let manifest = save_dataset(&data, &a.out, a.precision.into())?;
    let mut resolved = spec.clone();
    resolved.split = Some(spec.split_counts());
    write_text(&a.out.join("spec.resolved.toml"), &config::to_toml(&resolved)?)?;
    println!(
        "wrote {} images in {} classes (split {}/{}/{}) to {}",
        data.num_images(),
        data.classes.len(),
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test.len(),
        manifest.display()
    );
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let dataset = load_dataset(&cfg.dataset)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.resolved.toml"), &config::to_toml(&cfg)?)?;
    let log_path = cfg.out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let out = train(&cfg.train, &dataset, Some(&mut log))?;
    drop(log);
    let precision = cfg.train.precision;
    checkpoint::save(&out.best, &cfg.out_dir.join("best"), precision)?;
    checkpoint::save(&out.last, &cfg.out_dir.join("last"), precision)?;
    let summary = serde_json::json!({
        "iterations": out.log.len(),
        "best_validation": out.best_validation.map(|(epoch, acc)| serde_json::json!({"epoch": epoch, "accuracy": acc})),
        "final": out.log.last(),
        "seed": cfg.train.seed,
    });
    write_text(&cfg.out_dir.join("summary.json"), &format!("{summary:#}\n"))?;
    match out.best_validation {
        Some((epoch, acc)) => println!("trained {} episodes; best validation {:.4} after epoch {}", out.log.len(), acc, epoch + 1),
        None => println!("trained {} episodes; no validation split, keeping the final model", out.log.len()),
    }
    println!("outputs in {}", cfg.out_dir.display());
    Ok(EXIT_OK)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let dataset_path = a
        .dataset
        .or_else(|| cfg.as_ref().map(|c| c.dataset.clone()))
        .ok_or_else(|| Error::Config("eval needs --dataset or --config".into()))?;
    let shape = a
        .shape
        .or_else(|| cfg.as_ref().map(|c| c.eval.shape))
        .ok_or_else(|| Error::Config("eval needs --shape or --config".into()))?;
    let tasks = a.tasks.or_else(|| cfg.as_ref().map(|c| c.eval.tasks)).unwrap_or(1000);
    let split = a.split.or_else(|| cfg.as_ref().map(|c| c.eval.split)).unwrap_or(Split::Test);
    let lambda_bar = a.lambda_bar.or_else(|| cfg.as_ref().map(|c| c.train.lambda_bar)).unwrap_or(1.0);
    let seed = a
        .seed
        .or_else(|| cfg.as_ref().and_then(|c| c.eval.seed))
        .or_else(|| cfg.as_ref().map(|c| seeding::derive(c.train.seed, seeding::TEST)))
        .unwrap_or(0);
    if !a.checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let model = checkpoint::load(&a.checkpoint)?;
    let dataset = load_dataset(&dataset_path)?;
    let report = evaluate(&model, &dataset, split, shape, tasks, seed, lambda_bar)?;
    println!("{}", report.summary());
    let out_dir = a.out.or_else(|| cfg.as_ref().map(|c| c.out_dir.clone()));
    if let Some(dir) = out_dir {
        create_dir(&dir)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_text(&dir.join("eval_report.json"), &(json + "\n"))?;
        let table = dir.join("eval_results.csv");
        let fresh = !table.exists();
        let file = OpenOptions::new().create(true).append(true).open(&table).map_err(|e| Error::io(&table, e))?;
        report.write_csv_row(file, fresh)?;
        println!("report in {}", dir.display());
    }
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<i32> {
    let problem = Problem::toy(a.seed)?;
    let report = gradcheck::check(&problem, a.step, gradcheck::DEFAULT_FLOOR)?;
    println!("{:<28} {:>6} {:>7} {:>12}", "parameter", "coords", "refined", "max_rel_err");
    for p in &report.params {
        println!("{:<28} {:>6} {:>7} {:>12.3e}", p.name, p.coords, p.refined, p.max());
    }
    let pass = report.passes(a.tolerance);
    println!(
        "max_rel_err={:.3e} tolerance={:e} refined={} unresolved={} {}",
        report.max(),
        a.tolerance,
        report.refined(),
        report.unresolved(),
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(path) = a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
        write_text(&path, &(json + "\n"))?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_FAILURE })
}

fn sweep_cmd(a: SweepArgs) -> Result<i32> {
    let mut cfg = SweepConfig::load(&a.config)?;
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    if cfg.is_long_running() {
        eprintln!("note: this backbone is far larger than the desk presets; each cell may take hours");
    }
    let dataset = load_dataset(&cfg.dataset)?;
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.resolved.toml"), &config::to_toml(&cfg)?)?;
    let rows = run_sweep(&cfg.train, &cfg.sweep, &cfg.eval, &dataset, |r| {
        println!("{} = {:<14} seed {:<4} acc {:.4} ± {:.4}", r.axis, r.value, r.seed, r.mean_acc, r.ci);
    })?;
    let path = cfg.out_dir.join("sweep_results.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_table(&rows, file)?;
    for (value, mean) in mean_by_value(&rows) {
        println!("{} = {value}: mean accuracy {mean:.4}", cfg.sweep.axis.name());
    }
    println!("table in {}", path.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_cli(["espt", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run_cli(["espt", "train"]), EXIT_USAGE);
        assert_eq!(run_cli(["espt", "train", "--config", "/nonexistent/run.toml"]), EXIT_USAGE);
        assert_eq!(run_cli(["espt", "eval", "--checkpoint", "x", "--shape", "5,1"]), EXIT_USAGE);
        assert_eq!(run_cli(["espt", "gendata", "--out", "/tmp/x", "--classes", "0"]), EXIT_USAGE);
    }

    #[test]
    fn triple_parsing() {
        assert_eq!(parse_triple("4,0,4"), Ok([4, 0, 4]));
        assert!(parse_triple("4,0").is_err());
    }
}
