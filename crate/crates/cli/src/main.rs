mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taxocascade::inference::Strategy;
use taxocascade::model::Variant;
use taxocascade::Level;

/// Hierarchical taxonomic classification pipeline.
#[derive(Debug, Parser)]
#[command(name = "taxocascade", version, about)]
pub struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Computation is sequential, so any value gives the
    /// same bits; the value is recorded in the manifest.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    /// Directory receiving every output file and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean raw name records and write the taxonomy.
    TaxonomyBuild {
        /// CSV with class, order, family, genus and species columns.
        #[arg(long)]
        records: PathBuf,
        /// TOML cleaning config (merge_rules, uncertainty_markers).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print node counts, branching and checksum of a taxonomy.
    TaxonomyInspect {
        #[arg(long)]
        taxonomy: PathBuf,
    },
    /// Generate a synthetic taxonomy and dataset.
    DataSynth(SynthArgs),
    /// Drop records of taxa below a minimum sample count.
    DataFilter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        min_samples: usize,
        /// Levels to enforce (default: every level below class).
        #[arg(long, value_delimiter = ',')]
        levels: Vec<Level>,
    },
    /// Assign train/val/test splits, stratified by one level.
    DataSplit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Train, validation and test fractions.
        #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_list::<f64, 3>)]
        fractions: [f64; 3],
        #[arg(long, default_value = "species")]
        stratify_level: Level,
    },
    /// Train one model variant.
    Train(TrainArgs),
    /// Train a chain of variants, each warm-started from the previous one.
    TrainProgressive {
        /// TOML with optional [model] and [train] tables and [[stage]] entries.
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode predictions from a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, default_value = "greedy")]
        strategy: Strategy,
        #[arg(long, default_value_t = 3)]
        beam_width: usize,
    },
    /// Score predictions against true labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Metrics report of a reference model, for severity reduction.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Name recorded in the report.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Tabulate several metrics reports against the first.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML synthetic spec; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Node counts per level, class to species.
    #[arg(long, value_parser = parse_list::<usize, 5>)]
    pub shape: Option<[usize; 5]>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// CSV of precomputed features keyed by record id.
    #[arg(long)]
    pub provider: Option<PathBuf>,
    /// Restrict to one split of the data file.
    #[arg(long)]
    pub split: Option<taxocascade::data::Split>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub variant: Variant,
    /// Dataset with a split column, or training records when --val is given.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub taxonomy: PathBuf,
    #[arg(long)]
    pub provider: Option<PathBuf>,
    /// TOML with optional [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub adapter_dim: Option<usize>,
    #[arg(long)]
    pub width_divisor: Option<usize>,
}

/// Parses exactly `N` comma-separated values.
fn parse_list<T: std::str::FromStr, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T::Err: std::fmt::Display,
{
    let items = s
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|e| format!("{v:?}: {e}")))
        .collect::<Result<Vec<T>, String>>()?;
    let n = items.len();
    items.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
