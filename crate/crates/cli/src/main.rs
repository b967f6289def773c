//! `sdd`: generate data, train, sample, threshold and evaluate sparse data
//! diffusion models.
//!
//! Exit codes: 0 on success, 2 for usage and file-format errors, 3 for
//! numerical failures (divergence, degenerate steps).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "sdd", version, about = "Sparse data diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sparse dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a CSV loss log.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Zero small magnitudes until a target sparsity is reached.
    Threshold(ThresholdArgs),
    /// Compare generated data against real data.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct ManifestArg {
    /// Run manifest (JSON lines, appended). Defaults to manifest.jsonl next
    /// to the main output.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenKind {
    ClusteredDeposits,
    SparseMixture,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON generator spec; flags below override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<GenKind>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Output SDDMAT1 file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the data as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON training config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, `key=value` with dotted keys (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training data (IDX, SDDMAT1 or CSV).
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// JSON synthetic data spec to train on instead of a file.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Rows generated from `--synthetic`.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV loss log; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Ddim,
    Ddpm,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "ddim")]
    pub kind: KindArg,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample with the raw weights instead of the EMA shadow.
    #[arg(long)]
    pub no_ema: bool,
    /// Output SDDMAT1 file.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the samples as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the final sparsity-bit logit histogram (50 bins) as CSV.
    #[arg(long)]
    pub logit_hist: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Args, Debug)]
pub struct ThresholdArgs {
    /// Samples to threshold (SDDMAT1, CSV or IDX).
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long, conflicts_with = "match_data", required_unless_present = "match_data")]
    pub target_sparsity: Option<f64>,
    /// Match the mean sparsity of this dataset.
    #[arg(long = "match")]
    pub match_data: Option<PathBuf>,
    #[arg(long, default_value_t = sdd::sampler::DEFAULT_THRESHOLD_GRID)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Threshold result JSON; defaults to `<out>.threshold.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    /// Comma-separated subset of w1,mmd,corr,lisi,sparsity.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    #[arg(long, default_value_t = sdd::metrics::DEFAULT_LISI_K)]
    pub lisi_k: usize,
    /// Fixed MMD kernel bandwidth; the median heuristic otherwise.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat metric,value CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for sparsity histogram CSVs.
    #[arg(long)]
    pub hist_dir: Option<PathBuf>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let args: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a, &args),
        Command::Train(a) => commands::train(a, &args),
        Command::Sample(a) => commands::sample(a, &args),
        Command::Threshold(a) => commands::threshold(a, &args),
        Command::Eval(a) => commands::eval(a, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
