//! Command-line front end for `embdiff`.
//!
//! [`run`] parses arguments, dispatches to a subcommand and maps failures to
//! exit codes: 0 on success, 1 for runtime errors and failed recipes, 2 for
//! usage errors.

mod commands;
mod csv_out;
pub mod recipes;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use recipes::{run_recipe, RecipeName, RecipeReport};

#[derive(Debug, Parser)]
#[command(
    name = "embdiff",
    version,
    about = "Embedding diffusion: schedules, degeneration scores, training and decoding"
)]
pub struct Cli {
    /// Worker threads for Monte-Carlo estimates and decoding (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise schedules.
    #[command(subcommand)]
    Schedule(ScheduleCommand),
    /// Degeneration score of a schedule on a Gaussian embedding table.
    Dgs(DgsArgs),
    /// Smallest rescaling factor with DGS below a threshold.
    SearchF(SearchArgs),
    /// Embedding-table statistics.
    #[command(subcommand)]
    Emb(EmbCommand),
    /// Train a denoiser from a key = value config file.
    Train(TrainArgs),
    /// Decode sources with a trained checkpoint.
    Generate(GenerateArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run an experiment recipe and write its outputs and manifest.
    Recipe(RecipeArgs),
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    /// Print `t, alpha_bar, beta_bar, snr` for t = 0..=T as CSV.
    Dump(ScheduleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value = "sqrt")]
    pub kind: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Noise rescaling factor F.
    #[arg(long, default_value_t = 1.0)]
    pub factor: f64,
    /// Variance-preserving rescaling.
    #[arg(long)]
    pub vp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TableArgs {
    #[arg(long, default_value_t = 10_000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_e: f64,
    /// Seed of the embedding table and of the Monte-Carlo noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise draws per row and timestep.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Rows evaluated (0 = all).
    #[arg(long, default_value_t = 2000)]
    pub max_rows: usize,
    #[arg(long, default_value_t = 20)]
    pub grid: usize,
    /// nearest_neighbor or full_loss.
    #[arg(long, default_value = "nearest_neighbor")]
    pub classifier: String,
}

#[derive(Debug, Clone, Args)]
pub struct DgsArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub table: TableArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, default_value = "sqrt")]
    pub kind: String,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.15)]
    pub dgs_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub delta_f: f64,
    #[arg(long)]
    pub vp: bool,
    #[arg(long, default_value_t = 100.0)]
    pub cap: f64,
    /// Re-estimate the DGS for every candidate instead of using exit radii.
    #[arg(long)]
    pub direct: bool,
    #[command(flatten)]
    pub table: TableArgs,
}

#[derive(Debug, Subcommand)]
pub enum EmbCommand {
    /// Anisotropy (mean pairwise cosine) of a checkpoint's embedding table,
    /// or of a fresh Gaussian table when no checkpoint is given.
    Ani(AniArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AniArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_e: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path (default: model.ckpt next to the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV path (default: standard output).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sources, one per line as space-separated token ids (default: standard input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub b1: usize,
    #[arg(long, default_value_t = 1)]
    pub b2: usize,
    #[arg(long, default_value_t = 0)]
    pub early_stop: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rescale the sampling schedule only (1 = off).
    #[arg(long, default_value_t = 1.0)]
    pub sampling_factor: f64,
    /// JSON report of every candidate and its MBR risk.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV of the per-step rounded ẑ_0 quality; needs --references.
    #[arg(long)]
    pub dump_dynamics: Option<PathBuf>,
    /// References aligned with the inputs, same format.
    #[arg(long)]
    pub references: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RecipeArgs {
    pub name: RecipeName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: runs/<recipe>-<seed>).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Parameter override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<i32> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.workers {
            b = b.num_threads(n);
        }
        b.build()?
    };
    pool.install(|| commands::dispatch(&cli.command))
}
