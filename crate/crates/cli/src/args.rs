use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mtlfsl::metrics::SpreadConvention;
use mtlfsl::GraphMode;

/// Multi-task longitudinal regression with feature-similarity and temporal
/// fused-lasso penalties.
#[derive(Parser, Debug)]
#[command(name = "mtlfsl", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic longitudinal cohort and its true weights.
    Synth(SynthArgs),
    /// Fit one penalty configuration.
    Train(TrainArgs),
    /// Predict targets for a CSV with a trained model.
    Predict(PredictArgs),
    /// Score a trained model against a labeled CSV.
    Eval(EvalArgs),
    /// Grid search with patient-level K-fold cross-validation.
    Cv(CvArgs),
    /// Subsampling stability selection.
    Stability(StabilityArgs),
    /// Re-execute a run from its manifest and compare the outputs.
    Replay(ReplayArgs),
}

/// Output location and optional config file, common to every run command.
#[derive(Args, Debug, Clone)]
pub struct RunTarget {
    /// Directory receiving all outputs; created if missing.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphModeArg {
    Correlation,
    Laplacian,
}

impl From<GraphModeArg> for GraphMode {
    fn from(m: GraphModeArg) -> Self {
        match m {
            GraphModeArg::Correlation => GraphMode::FusedCorrelation,
            GraphModeArg::Laplacian => GraphMode::SignedLaplacian,
        }
    }
}

impl From<GraphMode> for GraphModeArg {
    fn from(m: GraphMode) -> Self {
        match m {
            GraphMode::FusedCorrelation => GraphModeArg::Correlation,
            GraphMode::SignedLaplacian => GraphModeArg::Laplacian,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadArg {
    Variance,
    StdDev,
}

impl From<SpreadArg> for SpreadConvention {
    fn from(s: SpreadArg) -> Self {
        match s {
            SpreadArg::Variance => SpreadConvention::Variance,
            SpreadArg::StdDev => SpreadConvention::StdDev,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    Nmse,
    Wr,
    MeanRmse,
}

/// Longitudinal CSV input.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DataArgs {
    /// CSV with columns patient_id,timepoint,<features...>,target.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Ordered timepoint labels [default: M00,M06,M12,M24,M36,M48].
    #[arg(long, value_delimiter = ',')]
    pub timepoints: Option<Vec<String>>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PenaltyArgs {
    /// Entrywise sparsity weight [default: 1].
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Feature-similarity graph weight [default: 0.05].
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Temporal fusion weight [default: 1].
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Correlation threshold [default: 0.5].
    #[arg(long)]
    pub tau: Option<f64>,
    /// ADMM penalty parameter [default: 1].
    #[arg(long)]
    pub rho: Option<f64>,
    /// Matrix multiplying W in the graph penalty [default: correlation].
    #[arg(long, value_enum)]
    pub graph_mode: Option<GraphModeArg>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SolverArgs {
    /// ADMM iteration budget [default: 5000].
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Absolute stopping tolerance [default: 1e-6].
    #[arg(long)]
    pub eps_abs: Option<f64>,
    /// Relative stopping tolerance [default: 1e-4].
    #[arg(long)]
    pub eps_rel: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SynthParams {
    /// Number of features [default: 20].
    #[arg(long)]
    pub features: Option<usize>,
    /// Number of timepoints [default: 6].
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Patients at baseline [default: 200].
    #[arg(long)]
    pub patients: Option<usize>,
    /// Zero-based indices of the features carrying signal [default: 0,1,2].
    #[arg(long, value_delimiter = ',')]
    pub active: Option<Vec<usize>>,
    /// Per-timepoint retention fractions [default: no dropout].
    #[arg(long, value_delimiter = ',')]
    pub dropout: Option<Vec<f64>>,
    /// Features per correlation block; the last block takes the remainder
    /// [default: 1].
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Within-block feature correlation [default: 0].
    #[arg(long)]
    pub block_corr: Option<f64>,
    /// AR(1) coefficient of a feature across visits [default: 0].
    #[arg(long)]
    pub persistence: Option<f64>,
    /// Target noise standard deviation [default: 1].
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Seed for the weights and the cohort [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: SynthParams,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainParams {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// best_config.json from `cv`; supplies penalties not given explicitly.
    #[arg(long)]
    pub cv_result: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: TrainParams,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelInput {
    /// Model file written by `train` or `cv`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// CSV in the model's schema.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: ModelInput,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalParams {
    #[command(flatten)]
    #[serde(flatten)]
    pub io: ModelInput,
    /// Denominator of nMSE [default: variance].
    #[arg(long, value_enum)]
    pub spread: Option<SpreadArg>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: EvalParams,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CvParams {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// JSON grid (lambda1_grid, lambda2_grid, lambda3_grid, tau_grid, ...)
    /// [default: the built-in grids].
    #[arg(long)]
    pub grid_file: Option<PathBuf>,
    /// Number of patient-level folds [default: 10].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fixes the correlation threshold instead of searching it.
    #[arg(long)]
    pub tau: Option<f64>,
    /// ADMM penalty parameter [default: 1].
    #[arg(long)]
    pub rho: Option<f64>,
    /// Matrix multiplying W in the graph penalty [default: correlation].
    #[arg(long, value_enum)]
    pub graph_mode: Option<GraphModeArg>,
    /// Selection metric [default: nmse].
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    /// Fold seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct CvArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: CvParams,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StabilityParams {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub penalty: PenaltyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// best_config.json from `cv`; supplies penalties not given explicitly.
    #[arg(long)]
    pub cv_result: Option<PathBuf>,
    /// Pools selections over these lambda1 values instead of one fit per run.
    #[arg(long, value_delimiter = ',')]
    pub lambda1_path: Option<Vec<f64>>,
    /// Number of subsamples [default: 100].
    #[arg(long)]
    pub runs: Option<usize>,
    /// Fraction of patients per subsample [default: 0.5].
    #[arg(long)]
    pub subsample: Option<f64>,
    /// Stability threshold on the max-over-time probability [default: 0.8].
    #[arg(long)]
    pub pi: Option<f64>,
    /// Subsample seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct StabilityArgs {
    #[command(flatten)]
    pub target: RunTarget,
    #[command(flatten)]
    pub params: StabilityParams,
}

#[derive(Args, Debug, Clone)]
pub struct ReplayArgs {
    /// manifest.json of the run to repeat.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the repeated run writes its outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
}
