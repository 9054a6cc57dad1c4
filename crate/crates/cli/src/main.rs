//! `tomo`: data generation, reconstruction, pre-training, benchmarks and
//! plot-data emission.
//!
//! Failures print a single `error: <category>: <message>` line on stderr and
//! exit with a category-specific code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "tomo", version, about = "Quantum state tomography from displace-and-measure data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a ground-truth density matrix.
    GenState(GenStateArgs),
    /// Simulate measurement statistics of a state.
    GenData(GenDataArgs),
    /// Reconstruct a state from data.
    Reconstruct(ReconstructArgs),
    /// Pre-train a model on a simulated state family.
    Pretrain(PretrainArgs),
    /// Single-pass reconstruction with a pre-trained model.
    SingleShot(SingleShotArgs),
    /// Run a benchmark sweep.
    Bench(BenchArgs),
    /// Wigner function of a state on a grid, as CSV.
    EmitWigner(EmitArgs),
    /// Husimi function of a state on a grid, as CSV.
    EmitHusimi(EmitArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StateKindArg {
    Fock,
    Coherent,
    Cat,
    Random,
}

#[derive(Debug, Args)]
pub struct GenStateArgs {
    #[arg(long, value_enum)]
    pub kind: StateKindArg,
    /// Real part of the amplitude.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub alpha: f64,
    /// Imaginary part of the amplitude.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub alpha_imag: f64,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Per-head phases, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub phases: Vec<f64>,
    /// Fock level.
    #[arg(long, default_value_t = 0)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MeasureArg {
    Husimi,
    Wigner,
    Genq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    None,
    Binomial,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long, value_enum, default_value_t = MeasureArg::Husimi)]
    pub measure: MeasureArg,
    /// Fock levels for generalized-Q measurements, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub ns: Vec<usize>,
    /// Square grid as `NXxNY`.
    #[arg(long, conflicts_with = "disk")]
    pub grid: Option<String>,
    /// Half-width of the grid.
    #[arg(long, default_value_t = 5.0)]
    pub extent: f64,
    /// Number of points sampled uniformly in a disk instead of a grid.
    #[arg(long)]
    pub disk: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub radius: f64,
    /// Seed of the disk sample.
    #[arg(long, default_value_t = 0)]
    pub disk_seed: u64,
    /// Padding of the displacement exponential (default `dim / 2`).
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long)]
    pub shots: Option<u64>,
    #[arg(long, value_enum, default_value_t = NoiseArg::None)]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0.01)]
    pub sigma: f64,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cgan,
    Imle,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub data: PathBuf,
    /// True state, enables fidelity tracking and the fidelity target.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// JSON configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Stop once this fidelity to the target is reached.
    #[arg(long)]
    pub fidelity_target: Option<f64>,
    /// iMLE start: `random`, `mixed`, or a state file.
    #[arg(long)]
    pub init: Option<String>,
    /// Apply the `G⁻¹` completeness correction (iMLE).
    #[arg(long)]
    pub g_correction: bool,
    /// Likelihood-change tolerance (iMLE).
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Per-iteration log as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Full run report as JSON.
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// JSON description of the state family.
    #[arg(long)]
    pub dataset_spec: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// JSON pre-training configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out states drawn from the same family with the next seed.
    #[arg(long, default_value_t = 50)]
    pub validation: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the generated training set as JSON lines.
    #[arg(long)]
    pub dataset_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SingleShotArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Further training steps on this data before reading out the state.
    #[arg(long, default_value_t = 0)]
    pub fine_tune: usize,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FigureArg {
    Fig3a,
    Fig3b,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub figure: FigureArg,
    /// Number of seeds, `0..n`.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Point counts for fig3b, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
    /// Methods to run: cgan, imle, imle_g.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// CGAN iteration budget.
    #[arg(long)]
    pub cgan_iterations: Option<usize>,
    /// iMLE iteration budget.
    #[arg(long)]
    pub imle_iterations: Option<usize>,
    /// Cat amplitude.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// JSON benchmark configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EmitArgs {
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long, default_value = "64x64")]
    pub grid: String,
    #[arg(long, default_value_t = 5.0)]
    pub extent: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure with a machine-parsable category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn bad_flag(message: impl Into<String>) -> Self {
        Self {
            category: "bad-flag",
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.category {
            "bad-flag" => 2,
            "missing-file" => 3,
            "dimension-mismatch" => 4,
            "numeric-failure" => 5,
            _ => 1,
        }
    }
}

impl From<tomo_core::Error> for CliError {
    fn from(e: tomo_core::Error) -> Self {
        Self {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

fn fail(e: CliError) -> ExitCode {
    let message = e.message.replace('\n', " ");
    eprintln!("error: {}: {}", e.category, message.trim());
    ExitCode::from(e.exit_code())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("TOMO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::bad_flag(format!("TOMO_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::bad_flag(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(CliError::bad_flag(first.trim_start_matches("error: ")));
        }
    };
    if let Err(e) = configure_threads() {
        return fail(e);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
