mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{InputShape, ImageSize};

#[derive(Parser, Debug)]
#[command(name = "defectkan", version, about = "KAN and CNN classifiers for surface-defect images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic six-class defect dataset as a PGM folder tree.
    SynthGen(SynthGenArgs),
    /// Train one model and write config, report, metrics and checkpoint.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on every image of a folder.
    Eval(EvalArgs),
    /// Print the exact learnable-parameter count of a model.
    Params(ParamsArgs),
    /// Check every differentiable primitive against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train several models over repeated seeds and aggregate test accuracy.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    #[arg(long)]
    out: std::path::PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64")]
    size: ImageSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flags shared by `train` and `benchmark`; unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    /// JSON file with any of the long flag names (snake_case) as keys.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model input as CxHxW; images are resized and channel-replicated.
    #[arg(long)]
    pub input: Option<InputShape>,
    /// Refit KAN grids every 5 epochs for the first 50.
    #[arg(long)]
    pub grid_update: bool,
    /// Seed of the stratified 80/10/10 split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// KAN grid intervals.
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// KAN spline degree.
    #[arg(long)]
    pub spline_degree: Option<usize>,
    /// Drop the SiLU residual term from KAN edges.
    #[arg(long)]
    pub no_base_term: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: Option<defectkan::ModelName>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[arg(long)]
    model: defectkan::ModelName,
    #[arg(long, default_value = "1x64x64")]
    input: InputShape,
    #[arg(long, default_value_t = 6)]
    classes: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random points per primitive.
    #[arg(long, default_value_t = 100)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Comma-separated model names.
    #[arg(long, value_delimiter = ',')]
    models: Vec<defectkan::ModelName>,
    #[arg(long)]
    repeats: Option<usize>,
    #[command(flatten)]
    run: RunFlags,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::SynthGen(a) => commands::synth_gen(&a.out, a.per_class, a.size, a.seed),
        Command::Train(a) => commands::train(a.model, a.run),
        Command::Eval(a) => commands::eval(&a.checkpoint, &a.data),
        Command::Params(a) => commands::params(a.model, a.input, a.classes),
        Command::Gradcheck(a) => commands::gradcheck(a.points, a.seed),
        Command::Benchmark(a) => commands::benchmark(a.models, a.repeats, a.run),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let (kind, code) = commands::classify(&e);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {message}");
            ExitCode::from(code)
        }
    }
}
