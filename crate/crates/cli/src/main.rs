use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "confflow", version, about = "Molecular conformation generation with a graph-conditioned continuous flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic toy dataset.
    GenData(GenDataArgs),
    /// Fit a flow to a dataset.
    Train(TrainArgs),
    /// Draw conformations for every molecule of a dataset.
    Sample(SampleArgs),
    /// Score generated conformations against a reference set.
    Eval(EvalArgs),
    /// Run the numerical self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Template names such as chain-6, ring-5 or branched-7 (repeatable).
    #[arg(long = "template", value_delimiter = ',')]
    pub templates: Vec<String>,
    #[arg(long)]
    pub conformers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of the resolved options.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small network, fixed-step solver.
    Desk,
    /// Full-size network, adaptive solver.
    Full,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset in JSON-lines form.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save a checkpoint every N iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Progress line every N iterations (0: silent).
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fixed number of samples per molecule.
    #[arg(long)]
    pub per_molecule: Option<usize>,
    /// Samples per reference conformer (default 2).
    #[arg(long)]
    pub times_reference: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adaptive solver tolerance, overriding the checkpoint's solver.
    #[arg(long, conflicts_with = "fixed_steps")]
    pub tol: Option<f64>,
    /// Fixed RK4 step count, overriding the checkpoint's solver.
    #[arg(long)]
    pub fixed_steps: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// RMSD threshold in angstrom.
    #[arg(long)]
    pub delta: Option<f64>,
    /// RMSD over heavy atoms only (default).
    #[arg(long, conflicts_with = "all_atoms")]
    pub heavy_only: bool,
    /// RMSD over all atoms including hydrogen.
    #[arg(long)]
    pub all_atoms: bool,
    /// Add distance MMD estimates.
    #[arg(long)]
    pub mmd: bool,
    /// Keep hydrogen-adjacent edges in the MMD distance set.
    #[arg(long)]
    pub with_hydrogen: bool,
    /// Seed for the pair-variant edge subsample.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum, serde::Serialize, serde::Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Fast,
    Full,
}

#[derive(Args)]
pub struct CheckArgs {
    #[arg(long, value_enum, default_value = "fast")]
    pub level: Level,
    /// Directory for the resolved configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    InputError = 2,
    Diverged = 3,
    PartialSampling = 4,
    CheckFailed = 5,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("CONFFLOW_THREADS") {
        let n: usize = value.trim().parse().map_err(|_| anyhow::anyhow!("CONFFLOW_THREADS must be a positive integer, got {value:?}"))?;
        anyhow::ensure!(n > 0, "CONFFLOW_THREADS must be a positive integer");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Check(a) => commands::check(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match run(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<confflow::Error>() {
                Some(confflow::Error::Divergence { .. }) => Status::Diverged,
                _ => Status::InputError,
            }
        }
    };
    ExitCode::from(status as u8)
}
