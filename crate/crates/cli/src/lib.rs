//! Command-line front end: `synth`, `train`, `infer`, `eval` and `selfcheck`.

pub mod commands;
pub mod config;
pub mod error;
pub mod selfcheck;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::config::{resolve_path, RunConfig};
use crate::error::{CliError, Result, EXIT_INVALID, EXIT_RUNTIME};

#[derive(Debug, Parser)]
#[command(name = "ein-seld", version, about = "Sound event localization and detection on first-order Ambisonics")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for relative data paths.
    #[arg(long, global = true, env = "EIN_SELD_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    pub single_thread: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Write predictions for a directory of clips.
    Infer(InferArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Run the built-in numerical checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub clip_len_s: Option<f64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Activity probability threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Also write metrics.json and per_file.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threshold_deg: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    init_logging(cli.verbose);
    if cli.single_thread {
        // Fails only if the pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).map_err(CliError::Json)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Synth(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            if let Some(n) = a.n_clips {
                cfg.dataset.n_clips = n;
            }
            if let Some(l) = a.clip_len_s {
                cfg.dataset.synth.clip_len_s = l;
            }
            let out = resolve_path(a.out.as_deref(), cfg.paths.output.as_deref(), root, "output")?;
            let m = commands::cmd_synth(&cfg, &out, a.force)?;
            println!(
                "synthesized {} clips into {} ({} with same-class overlap)",
                m.clips.len(),
                out.display(),
                m.same_class_overlap_clips.len()
            );
        }
        Command::Train(a) => {
            if let Some(s) = a.seed {
                cfg.set_seed(s);
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = lr;
            }
            let data = resolve_path(a.data.as_deref(), cfg.paths.data.as_deref(), root, "data")?;
            let out = resolve_path(a.out.as_deref(), cfg.paths.output.as_deref(), root, "output")?;
            let resume = a.resume.map(|p| resolve_path(Some(&p), None, root, "resume")).transpose()?;
            let outcome = commands::cmd_train(&cfg, &data, &out, resume.as_deref())?;
            print_json(&serde_json::json!({
                "final_checkpoint": outcome.report.final_checkpoint,
                "epochs": outcome.report.epochs.len(),
                "final_objective": outcome.report.epochs.last().map(|r| r.objective),
                "held_in_metrics": outcome.held_in_metrics,
            }))?;
        }
        Command::Infer(a) => {
            if let Some(t) = a.threshold {
                cfg.ead_threshold = t;
            }
            let ck = resolve_path(a.checkpoint.as_deref(), cfg.paths.checkpoint.as_deref(), root, "checkpoint")?;
            let input = resolve_path(a.input.as_deref(), cfg.paths.data.as_deref(), root, "input")?;
            let out = resolve_path(a.out.as_deref(), cfg.paths.predictions.as_deref(), root, "output")?;
            let n = commands::cmd_infer(&cfg, &ck, &input, &out)?;
            println!("wrote predictions for {n} clips into {}", out.display());
        }
        Command::Eval(a) => {
            if let Some(t) = a.threshold_deg {
                cfg.metrics.threshold_deg = t;
            }
            let pred = resolve_path(a.pred.as_deref(), cfg.paths.predictions.as_deref(), root, "prediction")?;
            let reference = resolve_path(a.reference.as_deref(), cfg.paths.references.as_deref(), root, "reference")?;
            let out = a
                .out
                .map(|p| resolve_path(Some(&p), None, root, "output"))
                .transpose()?;
            let outcome = commands::cmd_eval(&cfg, &pred, &reference, out.as_deref())?;
            print_json(&outcome.overall)?;
        }
        Command::Selfcheck(a) => {
            let results = selfcheck::run_all(a.seed);
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                let e = CliError::SelfCheck(failed.join(", "));
                eprintln!("error: {e}");
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(0)
}
