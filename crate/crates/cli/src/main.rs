//! `pgc`: dictionary construction, filtering, benchmarks, synthetic data,
//! training and evaluation for perspective-guided convolution networks.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure
//! (NaN in training, or a failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgc_core::{DictionaryConfig, NormalizationMode, PgcError};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<PgcError> for CliError {
    fn from(e: PgcError) -> Self {
        match e {
            PgcError::InvalidArgument(m) => CliError::Usage(m),
            PgcError::Numerical(m) => CliError::Numerical(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "pgc", version, about = "Perspective-guided convolution toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the Gaussian kernel dictionary and write it to --out.
    Dict(DictCmd),
    /// Apply the spatially variant Gaussian filter to a tensor.
    Filter(FilterCmd),
    /// Time the exact filter against the low-rank path.
    Bench(BenchCmd),
    /// Generate a synthetic scene set.
    Synth(SynthCmd),
    /// Train a density network on a scene set.
    Train(TrainCmd),
    /// Counting metrics for a checkpoint or for two count lists.
    Eval(EvalCmd),
    /// Run the perspective-estimator phases and fine-tune a density network.
    Penet(PenetCmd),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckCmd),
}

#[derive(Args, Debug, Default, Clone)]
pub struct DictArgs {
    /// Kernel size (odd).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    #[arg(long)]
    pub sigma_max: Option<f64>,
    #[arg(long)]
    pub sigma_step: Option<f64>,
    /// Fixed number of eigen-kernels instead of the energy rule.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, value_enum)]
    pub normalization: Option<Normalization>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Normalization {
    UnitSum,
    Analytic1d,
}

impl DictArgs {
    pub fn apply(&self, base: &DictionaryConfig) -> Result<DictionaryConfig, CliError> {
        let mut cfg = base.clone();
        if let Some(k) = self.k {
            if k % 2 == 0 || k == 0 {
                return Err(CliError::Usage(format!("--k must be odd and positive, got {k}")));
            }
            cfg.kernel_size = k;
        }
        if let Some(v) = self.sigma_min {
            cfg.sigma_min = v;
        }
        if let Some(v) = self.sigma_max {
            cfg.sigma_max = v;
        }
        if let Some(v) = self.sigma_step {
            cfg.sigma_step = v;
        }
        if self.components.is_some() {
            cfg.components = self.components;
        }
        if let Some(n) = self.normalization {
            cfg.mode = match n {
                Normalization::UnitSum => NormalizationMode::UnitSum,
                Normalization::Analytic1d => NormalizationMode::Analytic1d,
            };
        }
        cfg.validate()
            .map_err(|e| CliError::Usage(format!("dictionary flags (--k, --sigma-min/max/step, --components): {e}")))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct DictCmd {
    #[command(flatten)]
    pub dict: DictArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    Exact,
    Approx,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Replicate,
    Zero,
}

#[derive(Args, Debug)]
pub struct FilterCmd {
    /// Input tensor container (C×H×W).
    #[arg(long)]
    pub input: PathBuf,
    /// Perspective map container (H×W).
    #[arg(long)]
    pub perspective: PathBuf,
    #[arg(long, value_enum, default_value = "approx")]
    pub mode: FilterMode,
    #[arg(long, value_enum, default_value = "replicate")]
    pub padding: Padding,
    /// Sigmoid slope; defaults to 4 / (max − min) of the perspective map.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Sigmoid center; defaults to the perspective mean.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Blur amplitude.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Blur offset.
    #[arg(long, default_value_t = 0.0)]
    pub p0: f64,
    #[command(flatten)]
    pub dict: DictArgs,
}

#[derive(Args, Debug)]
pub struct BenchCmd {
    /// Feature shape `C,H,W`.
    #[arg(long, default_value = "64,96,128")]
    pub shape: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[command(flatten)]
    pub dict: DictArgs,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub min_heads: Option<usize>,
    #[arg(long)]
    pub max_heads: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    /// Scene set written by `pgc synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out scene set evaluated after training.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Number of PGC blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Build the a = 0 baseline (no smoothing).
    #[arg(long)]
    pub no_smoothing: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub dict: DictArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// Checkpoint directory written by `pgc train`.
    #[arg(long, requires = "data", conflicts_with_all = ["pred", "gt"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Predicted counts, one per line (CSV with a header is accepted).
    #[arg(long, requires = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground-truth counts in the same layout as --pred.
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Estimator frozen during fine-tuning.
    A,
    /// Image encoder trained jointly.
    B,
}

#[derive(Args, Debug)]
pub struct PenetCmd {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    /// Last phase to run.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stop_after: u8,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub phase2_epochs: Option<usize>,
    /// Fine-tuning epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[command(flatten)]
    pub dict: DictArgs,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PGC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("PGC_THREADS must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("PGC_THREADS: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| commands::run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pgc: {e}");
            ExitCode::from(e.code())
        }
    }
}
