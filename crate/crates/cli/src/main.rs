use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod report;

/// Infer spatial gene-gene couplings, simulate expression fields and run
/// in-silico knockouts.
#[derive(Debug, Parser)]
#[command(name = "cellcomm", version, about)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a coupling model to normalized counts and save it.
    Infer(InferArgs),
    /// Generate an expression field under a saved model.
    Simulate(SimulateArgs),
    /// Knock out one gene in one spot and track the response.
    Perturb(PerturbArgs),
    /// Simulate-then-infer recovery on a synthetic lattice.
    Selfcheck(SelfcheckArgs),
    /// Agreement between models fitted on two parts of the data.
    Consistency(ConsistencyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormatArg {
    DenseCsv,
    Mtx,
}

impl From<FormatArg> for cellcomm::io::DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::DenseCsv => cellcomm::io::DataFormat::DenseCsv,
            FormatArg::Mtx => cellcomm::io::DataFormat::MatrixMarket,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false)]
struct GraphArgs {
    /// Connect spots closer than this distance.
    #[arg(long)]
    radius: Option<f64>,
    /// Connect each spot to its k nearest neighbours (symmetrized).
    #[arg(long)]
    knn: Option<usize>,
}

/// Like [`GraphArgs`], but optional: falls back to the graph recorded with a model.
#[derive(Debug, Clone, Args, Serialize)]
#[group(required = false, multiple = false)]
struct GraphOverride {
    /// Connect spots closer than this distance.
    #[arg(long)]
    radius: Option<f64>,
    /// Connect each spot to its k nearest neighbours (symmetrized).
    #[arg(long)]
    knn: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct NormalizeArgs {
    /// Drop genes detected in fewer spots than this.
    #[arg(long, default_value_t = 100)]
    min_cells: usize,
    /// Skip counts-per-million scaling.
    #[arg(long)]
    no_cpm: bool,
    /// Skip the ln(1 + x) transform.
    #[arg(long)]
    no_log1p: bool,
    /// Keep spots with x in [MIN, MAX] only.
    #[arg(long, value_delimiter = ',', num_args = 2, value_names = ["MIN", "MAX"])]
    crop_x: Option<Vec<f64>>,
    /// Keep spots with y in [MIN, MAX] only.
    #[arg(long, value_delimiter = ',', num_args = 2, value_names = ["MIN", "MAX"])]
    crop_y: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::DenseCsv)]
    format: FormatArg,
    #[command(flatten)]
    graph: GraphArgs,
    /// Number of hop shells (1 = nearest neighbours only).
    #[arg(long, default_value_t = 1)]
    khops: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-6)]
    grad_tol: f64,
    /// Half-width of the uniform initialization (0 = start from zeros).
    #[arg(long, default_value_t = 0.0)]
    init_scale: f64,
    /// Hold the intra-spot block at its initial value.
    #[arg(long)]
    freeze_intra: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    normalize: NormalizeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    /// Directory written by `infer`.
    #[arg(long)]
    model: PathBuf,
    /// Spot coordinates (`spot_id,x,y`).
    #[arg(long, required_unless_present = "grid", conflicts_with = "grid")]
    coords: Option<PathBuf>,
    /// Use an N x N unit lattice joined within radius 1.5.
    #[arg(long)]
    grid: Option<usize>,
    /// Graph for `--coords`; defaults to the one recorded with the model.
    #[command(flatten)]
    graph: GraphOverride,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Entries to hold fixed (`spot_id,gene,value`).
    #[arg(long)]
    freeze: Option<PathBuf>,
    /// Starting field (dense CSV, rows are projected to the sphere); noise if absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output CSV; a JSON report is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PerturbArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::DenseCsv)]
    format: FormatArg,
    #[arg(long)]
    model: PathBuf,
    /// Gene to knock out.
    #[arg(long)]
    gene: String,
    /// `random` or a spot id.
    #[arg(long, default_value = "random")]
    target: String,
    /// Shell radii, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = [15.0, 30.0])]
    radii: Vec<f64>,
    /// Marker for the signature; defaults to the knocked-out gene.
    #[arg(long)]
    signature_marker: Option<String>,
    #[arg(long, default_value_t = 25)]
    signature_top: usize,
    /// Graph for the counts; defaults to the one recorded with the model.
    #[command(flatten)]
    graph: GraphOverride,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Observed ranking (one gene per line, best first) to validate against.
    #[arg(long)]
    observed_ranking: Option<PathBuf>,
    #[arg(long)]
    no_cpm: bool,
    #[arg(long)]
    no_log1p: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 4)]
    genes: usize,
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    /// Even vs odd spot indices of a single dataset.
    Parity,
    /// One part per input file (exactly two).
    ByFile,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ConsistencyArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    coords: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::DenseCsv)]
    format: FormatArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Parity)]
    split: SplitArg,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, default_value_t = 1)]
    khops: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    #[arg(long, default_value_t = 1000)]
    perms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    normalize: NormalizeArgs,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let exec = if cli.sequential {
        cellcomm::Execution::Sequential
    } else {
        cellcomm::Execution::default()
    };
    let result = match &cli.command {
        Command::Infer(a) => commands::infer(a, exec),
        Command::Simulate(a) => commands::simulate(a, exec),
        Command::Perturb(a) => commands::perturb(a, exec),
        Command::Selfcheck(a) => commands::selfcheck(a, exec),
        Command::Consistency(a) => commands::consistency(a, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
