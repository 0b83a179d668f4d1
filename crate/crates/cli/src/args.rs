use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sci_core::TrendSpec;

#[derive(Debug, Parser)]
#[command(name = "sci", version, about = "Synthetic control estimation under interference")]
pub struct Cli {
    /// Worker threads for parallel work; results do not depend on it.
    #[arg(long, global = true, env = "SCI_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate average direct and interference effects.
    Estimate(EstimateArgs),
    /// Re-run the estimator with a fake intervention inside the pre-period.
    Placebo(PlaceboArgs),
    /// Estimate per-period effects from a post-period trend model.
    Dynamic(DynamicArgs),
    /// Run the Monte Carlo harness.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Wide CSV: one row per period, one column per unit.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of pre-intervention periods.
    #[arg(long)]
    pub t0: usize,
    /// Column label of the treated unit.
    #[arg(long)]
    pub treated: String,
    /// Number of latent factors.
    #[arg(long)]
    pub r: usize,
    /// LTS trim count; floor(N/2) + 1 by default.
    #[arg(long)]
    pub h: Option<usize>,
    /// Wide CSV of covariates, one column per covariate.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BootArgs {
    /// Number of bootstrap replicates.
    #[arg(long, value_name = "B")]
    pub bootstrap: Option<usize>,
    /// Circular block length; round(T^(1/3)) by default.
    #[arg(long)]
    pub block_len: Option<usize>,
    /// Confidence levels for the intervals.
    #[arg(long, value_delimiter = ',', default_value = "0.90,0.95")]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the original control set in every replicate.
    #[arg(long)]
    pub fix_selection: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub boot: BootArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PlaceboArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    /// Fake intervention period, strictly inside the pre-period.
    #[arg(long)]
    pub placebo_t0: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DynamicArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub boot: BootArgs,
    /// `poly:D` or `sieve:K:S` (K may be `auto`).
    #[arg(long, value_parser = parse_trend)]
    pub trend: TrendSpec,
    /// Per-period table; the report path with a `.csv` extension by default.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON file holding one cell or a grid of cells.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_trend(s: &str) -> Result<TrendSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let int = |v: &str| v.parse::<usize>().map_err(|_| format!("'{v}' is not a non-negative integer"));
    match parts.as_slice() {
        ["poly", d] => Ok(TrendSpec::Poly { degree: int(d)? }),
        ["sieve", k, s] => {
            let k = if *k == "auto" || k.is_empty() { None } else { Some(int(k)?) };
            let smoothness: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
            Ok(TrendSpec::Sieve { k, smoothness })
        }
        _ => Err(format!("'{s}' is not poly:D or sieve:K:S")),
    }
}

pub fn trend_label(spec: &TrendSpec) -> String {
    match spec {
        TrendSpec::Poly { degree } => format!("poly:{degree}"),
        TrendSpec::Sieve { k: Some(k), smoothness } => format!("sieve:{k}:{smoothness}"),
        TrendSpec::Sieve { k: None, smoothness } => format!("sieve:auto:{smoothness}"),
    }
}
