//! `lne`: generate synthetic cohorts, pretrain encoders, evaluate, plot and
//! verify gradients. One command per invocation.
//!
//! Exit codes: 0 success, 1 verification failure or numerical error,
//! 2 usage or configuration error, 3 I/O error.

mod commands;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use lne_core::config::ExperimentConfig;
use lne_core::evalviz::{EvalMode, Task};
use lne_core::model::FeatureMode;
use lne_core::training::Method;
use lne_core::LneError;

#[derive(Parser)]
#[command(name = "lne", version = env!("LNE_VERSION"), about = "Longitudinal neighbourhood embedding experiments")]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `output.data_dir`.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Override `output.run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal cohort into the data directory.
    GenData(GenDataArgs),
    /// Pretrain an encoder/decoder on one fold's training subjects.
    Train(TrainArgs),
    /// Fit downstream heads on a pretrained encoder and score the test subjects.
    Eval(EvalArgs),
    /// Trajectory-field plot, robust curve and per-group trajectory norms.
    Plot(PlotArgs),
    /// Finite-difference gradient checks of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Full cross-validation: pretrain, evaluate and aggregate every fold.
    Cv(CvArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lne,
    Ae,
    Lssl,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Lne => Method::Lne,
            MethodArg::Ae => Method::Ae,
            MethodArg::Lssl => Method::Lssl,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Defaults to `training.method`.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Override `training.lambda_dir`.
    #[arg(long)]
    lambda_dir: Option<f64>,
    /// Override `training.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory name under the run root; defaults to `<method>-fold<k>`.
    #[arg(long)]
    name: Option<String>,
    /// Continue from the run's `last` checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Age,
    Group,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeaturesArg {
    #[value(name = "z")]
    Z,
    #[value(name = "z+dz")]
    ZDz,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, e.g. `runs/lne-fold0/best`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "age")]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "frozen")]
    mode: ModeArg,
    /// Feature set; `z` for age, `z+dz` for group by default.
    #[arg(long, value_enum)]
    features: Option<FeaturesArg>,
    /// Fold whose test subjects are scored; defaults to the checkpoint's fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Output directory; defaults to `eval-<task>-<mode>` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ColorArg {
    Age,
    Group,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Arrow colouring.
    #[arg(long, value_enum, default_value = "age")]
    color: ColorArg,
    /// Output directory; defaults to `plot` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Only checks whose name contains this text.
    #[arg(long)]
    filter: Option<String>,
    /// Corrupt the analytic gradient of the named check (self-test of the checker).
    #[arg(long)]
    corrupt: Option<String>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    /// Output directory; defaults to `cv` under the run root.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    Verification(String),
    Usage(String),
    Lib(LneError),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Lib(e) if e.is_io() => 3,
            Failure::Lib(LneError::Config(_)) => 2,
            Failure::Lib(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
            Failure::Usage(m) => f.write_str(m),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<LneError> for Failure {
    fn from(e: LneError) -> Self {
        Failure::Lib(e)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &cli.data_dir {
        cfg.output.data_dir = d.clone();
    }
    if let Some(d) = &cli.run_dir {
        cfg.output.run_dir = d.clone();
    }
    Ok(cfg.resolve()?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gradcheck(a) => commands::gradcheck(&commands::GradcheckRequest {
            seeds: a.seeds,
            filter: a.filter.clone(),
            corrupt: a.corrupt.clone(),
            out: a.out.clone(),
        }),
        Command::GenData(a) => commands::gen_data(&load_config(&cli)?, a.force),
        Command::Train(a) => {
            let req = commands::TrainRequest {
                method: a.method.map(Method::from),
                fold: a.fold,
                lambda_dir: a.lambda_dir,
                epochs: a.epochs,
                name: a.name.clone(),
                resume: a.resume,
            };
            commands::train(load_config(&cli)?, &req).map(|_| ())
        }
        Command::Eval(a) => {
            let req = commands::EvalRequest {
                checkpoint: a.checkpoint.clone(),
                task: match a.task {
                    TaskArg::Age => Task::Age,
                    TaskArg::Group => Task::Group,
                },
                mode: match a.mode {
                    ModeArg::Frozen => EvalMode::Frozen,
                    ModeArg::Finetune => EvalMode::Finetune,
                },
                features: a.features.map(|f| match f {
                    FeaturesArg::Z => FeatureMode::ZOnly,
                    FeaturesArg::ZDz => FeatureMode::ZConcatDz,
                }),
                fold: a.fold,
                out: a.out.clone(),
            };
            commands::eval(load_config(&cli)?, &req)
        }
        Command::Plot(a) => commands::plot(
            &load_config(&cli)?,
            &a.checkpoint,
            matches!(a.color, ColorArg::Group),
            a.out.clone(),
        ),
        Command::Cv(a) => commands::cv(&load_config(&cli)?, a.out.clone()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
