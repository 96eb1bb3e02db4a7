use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use coca::config::RunConfig;
use coca::metrics::Protocol;
use coca::objective::Variant;
use coca::pipeline::{self, EvalInput, Stage, StageError, StageResult, Suite};

#[derive(Parser)]
#[command(
    name = "coca",
    version,
    about = "Contrastive one-class anomaly detection for time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (`section.key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override objective.variant.
    #[arg(long)]
    variant: Option<String>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Standard,
    Detection,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic suite and a config that trains on it.
    Generate {
        #[arg(long, value_enum, default_value = "standard")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, detect and evaluate.
    Run(RunArgs),
    /// Train and save a checkpoint only.
    Train(RunArgs),
    /// Score the configured data with a saved checkpoint.
    Detect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score point predictions, or thresholded window scores, against labels.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        /// pw, pa, rpa or all.
        #[arg(long, default_value = "all")]
        protocol: String,
    },
    /// Compare variants over repeated seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variant names.
        #[arg(long)]
        variants: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Summarize the artifacts of an output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn at<T>(r: coca::Result<T>, stage: Stage) -> StageResult<T> {
    r.map_err(|source| StageError { stage, source })
}

fn load_config(args: &RunArgs) -> StageResult<RunConfig> {
    let mut cfg = at(RunConfig::load(&args.config), Stage::Config)?;
    if let Some(v) = &args.variant {
        cfg.objective.variant = at(Variant::parse(v), Stage::Config)?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn protocols(s: &str) -> StageResult<Vec<Protocol>> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Protocol::ALL.to_vec());
    }
    s.split(',')
        .map(|p| at(Protocol::parse(p), Stage::Config))
        .collect()
}

fn execute(cmd: Command) -> StageResult<()> {
    match cmd {
        Command::Generate { suite, seed, out } => {
            let suite = match suite {
                SuiteArg::Standard => Suite::Standard,
                SuiteArg::Detection => Suite::Detection,
            };
            let path = pipeline::cmd_generate(suite, seed, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let summary = pipeline::cmd_run(&cfg)?;
            print!("{}", pipeline::cmd_report(&cfg.out_dir)?);
            if summary.rpa_f1.is_none() {
                println!("no labels: scores written without a scorecard");
            }
        }
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let trained = pipeline::cmd_train(&cfg)?;
            println!(
                "trained {} epochs, best epoch {}, center {}",
                trained.history.records.len(),
                trained.best_epoch,
                trained.center.fingerprint()
            );
        }
        Command::Detect { run, checkpoint } => {
            let cfg = load_config(&run)?;
            let outcome = pipeline::cmd_detect(&cfg, &checkpoint)?;
            match outcome.rpa_f1() {
                Some(f1) => println!("RPA F1 {f1:.4}"),
                None => println!("scored {} objects", outcome.scored.len()),
            }
        }
        Command::Eval {
            labels,
            predictions,
            scores,
            tau,
            protocol,
        } => {
            let input = match (predictions, scores) {
                (Some(p), _) => EvalInput::Predictions(p),
                (None, Some(path)) => EvalInput::Scores { path, tau },
                (None, None) => unreachable!("clap requires one input"),
            };
            let card = pipeline::cmd_eval(&labels, &input, &protocols(&protocol)?)?;
            for r in &card.aggregate {
                println!(
                    "{:<4} tp {} fp {} fn {}  precision {:.4} recall {:.4} f1 {:.4}",
                    r.protocol.name(),
                    r.tp,
                    r.fp,
                    r.fn_,
                    r.precision,
                    r.recall,
                    r.f1
                );
            }
        }
        Command::Ablate {
            run,
            variants,
            repeats,
        } => {
            let cfg = load_config(&run)?;
            let list: Vec<Variant> = variants
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|v| at(Variant::parse(v), Stage::Config))
                .collect::<StageResult<_>>()?;
            let rows = pipeline::cmd_ablate(&cfg, &list, repeats)?;
            print!("{}", pipeline::format_ablation(&rows));
        }
        Command::Report { out } => print!("{}", pipeline::cmd_report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
