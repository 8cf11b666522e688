mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ofp_core::{AgentClass, BaselineKind, IouVariant, ScheduleKind, SyntheticKind};

use crate::commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "ofp", version, about = "Occupancy and flow prediction toolkit")]
struct Cli {
    /// Optional TOML or JSON config file; explicit flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize history occupancy, map layers and history flow.
    Rasterize(SceneIo),
    /// Build waypoint ground truth: observed and occluded occupancy plus backward flow.
    Gt(SceneIo),
    /// Run a baseline predictor and write one prediction directory per scenario.
    Predict(PredictArgs),
    /// Score predictions against ground truth built from the scenarios.
    Eval(EvalArgs),
    /// Finite-difference checks of the loss and model gradients.
    Gradcheck(SeedArg),
    /// Invariant suite for the attention building blocks.
    BlocksSelftest(SeedArg),
    /// Attention building block utilities.
    Blocks {
        #[command(subcommand)]
        command: BlocksCommand,
    },
    /// Train the small demo predictor on synthetic scenes.
    TrainDemo(TrainArgs),
    /// Compare uniform and linear flow-loss schedules on held-out scenes.
    WlAblation(AblationArgs),
    /// Print a metric table, with reference deltas, from a results file.
    Report(ReportArgs),
    /// Write seeded synthetic scenario files.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum BlocksCommand {
    /// Invariant suite for the attention building blocks.
    Selftest(SeedArg),
}

#[derive(Args, Debug, Clone, Default)]
pub struct GridArgs {
    /// Grid height in cells.
    #[arg(long)]
    pub height: Option<usize>,
    /// Grid width in cells.
    #[arg(long)]
    pub width: Option<usize>,
    /// Cell edge length in meters.
    #[arg(long)]
    pub cell_size: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SceneArgs {
    /// Agent classes to rasterize, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_class, default_value = "vehicle")]
    pub classes: Vec<AgentClass>,
    /// Ignore unknown fields in scenario files instead of rejecting them.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Args, Debug)]
pub struct SceneIo {
    /// Scenario file (.json, .jsonl) or directory of them.
    pub scenarios: PathBuf,
    /// Output directory; one sub-directory per scenario when there are several.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Scenario file (.json, .jsonl) or directory of them.
    pub scenarios: PathBuf,
    /// Baseline to run: persistence or cv.
    #[arg(long)]
    pub baseline: BaselineKind,
    /// Output directory; receives one sub-directory per scenario id.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Scenario file (.json, .jsonl) or directory of them.
    pub scenarios: PathBuf,
    /// Directory with one prediction sub-directory per scenario id.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Where to write summary.json and summary.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; the summary does not depend on it.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Number of evenly spaced PR-AUC thresholds.
    #[arg(long)]
    pub thresholds: Option<usize>,
    /// Soft-IoU denominator: paper or union.
    #[arg(long)]
    pub iou_variant: Option<IouVariant>,
    /// Print the summary as JSON instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flow-loss schedule: uniform, linear or comma separated weights.
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    /// Gradient steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Seed for the initialization and the synthetic scenes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step size.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Heavy-ball momentum in [0, 1).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Model parameter file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-step loss curve as JSON.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    /// Seed for the initialization and the synthetic scenes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient steps per schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics report or dataset summary JSON.
    pub results: PathBuf,
    /// Re-emit the parsed results as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene kinds, cycled over the generated files.
    #[arg(long, value_delimiter = ',', default_value = "linear")]
    pub kind: Vec<SyntheticKind>,
    /// Number of scenarios.
    #[arg(long, default_value_t = 10)]
    pub count: u64,
    /// First scenario seed; file i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

fn parse_class(s: &str) -> Result<AgentClass, String> {
    match s {
        "vehicle" => Ok(AgentClass::Vehicle),
        "pedestrian" => Ok(AgentClass::Pedestrian),
        "cyclist" => Ok(AgentClass::Cyclist),
        other => Err(format!(
            "unknown class '{other}' (expected vehicle, pedestrian or cyclist)"
        )),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = commands::load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Rasterize(args) => commands::rasterize(&config, &args),
        Command::Gt(args) => commands::ground_truth(&config, &args),
        Command::Predict(args) => commands::predict(&config, &args),
        Command::Eval(args) => commands::eval(&config, &args),
        Command::Gradcheck(args) => commands::gradcheck(&config, &args),
        Command::BlocksSelftest(args)
        | Command::Blocks {
            command: BlocksCommand::Selftest(args),
        } => commands::blocks_selftest(&config, &args),
        Command::TrainDemo(args) => commands::train_demo(&config, &args),
        Command::WlAblation(args) => commands::wl_ablation(&config, &args),
        Command::Report(args) => commands::report(&args),
        Command::Synth(args) => commands::synth(&config, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
