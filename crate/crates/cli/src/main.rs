use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "bllim", version, about = "Block-diagonal covariance locally-linear mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and write model.json and report.json
    Fit(FitArgs),
    /// Predict responses for new covariates
    Predict(PredictArgs),
    /// Generate synthetic data
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Repeated k-fold cross-validation
    Cv(CvArgs),
    /// Run a simulation benchmark
    Bench(BenchArgs),
    /// Write the covariate network of one cluster as an edge list
    ExportNetwork(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    Slope,
    Bic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Covariance,
    Correlation,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Smallest number of clusters tried
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    /// Largest number of clusters tried
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    /// Candidate structures per K (default: number of covariates)
    #[arg(long)]
    pub max_candidates: Option<usize>,
    #[arg(long, value_enum, default_value_t = Selection::Slope)]
    pub selection: Selection,
    /// Keep residual covariances diagonal (no structure search)
    #[arg(long)]
    pub diagonal: bool,
    #[arg(long, value_enum, default_value_t = Scale::Covariance)]
    pub threshold_scale: Scale,
    #[arg(long, default_value_t = 200)]
    pub max_iterations: usize,
    /// Stop when the last gain is below this fraction of the total gain
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// k-means restarts for initialization
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    /// Relative ridge added to covariances that fail to factor
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
    /// Minimum responsibility mass per cluster (default L+1)
    #[arg(long)]
    pub min_mass: Option<f64>,
    #[arg(long, env = "BLLIM_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Covariates CSV (n × D, header row)
    #[arg(long)]
    pub x: PathBuf,
    /// Responses CSV (n × L, header row)
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub x: PathBuf,
    /// Output CSV
    #[arg(long)]
    pub out: PathBuf,
    /// Append the per-row gating weights
    #[arg(long)]
    pub weights: bool,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Locally-affine mixture with Toeplitz residual blocks
    PlanA(PlanAArgs),
    /// Nonlinear manifold with hidden responses
    Manifold(ManifoldArgs),
}

#[derive(Debug, Args)]
pub struct PlanAArgs {
    #[arg(long, default_value_t = 4162)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub l: usize,
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    /// Toeplitz autocorrelation inside blocks
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    #[arg(long, env = "BLLIM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FnTag {
    F,
    G,
    H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CovTag {
    Factor,
    Toeplitz,
    Identity,
    Blocks,
}

#[derive(Debug, Args)]
pub struct ManifoldArgs {
    #[arg(long = "fn", value_enum, default_value_t = FnTag::F)]
    pub function: FnTag,
    #[arg(long, value_enum, default_value_t = CovTag::Identity)]
    pub cov: CovTag,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 50)]
    pub d: usize,
    /// Factors per covariance (factor and blocks structures)
    #[arg(long, default_value_t = 5)]
    pub factor_rank: usize,
    #[arg(long, default_value_t = 5)]
    pub block_size: usize,
    #[arg(long, env = "BLLIM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Bllim,
    Constant,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 50)]
    pub repetitions: usize,
    /// `bllim` runs the fit pipeline configured by the run flags
    #[arg(long, value_enum, default_value_t = Method::Bllim)]
    pub method: Method,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableTag {
    Table1,
    Table2,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub table: TableTag,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    /// Training size (default 4162 for table1, 200 for table2)
    #[arg(long)]
    pub n: Option<usize>,
    /// Test size (default 10000 for table1, 200 for table2)
    #[arg(long)]
    pub test_n: Option<usize>,
    /// Covariates (default 100 for table1, 50 for table2)
    #[arg(long)]
    pub d: Option<usize>,
    /// table2 functions to run (default all)
    #[arg(long = "fn", value_enum, value_delimiter = ',')]
    pub functions: Vec<FnTag>,
    /// table2 covariance structures to run (default all)
    #[arg(long, value_enum, value_delimiter = ',')]
    pub cov: Vec<CovTag>,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 5)]
    pub k_max: usize,
    #[arg(long, env = "BLLIM_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 1-based cluster index
    #[arg(long)]
    pub cluster: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Simulate(SimulateCommand::PlanA(a)) => commands::simulate_plan_a(&a),
        Command::Simulate(SimulateCommand::Manifold(a)) => commands::simulate_manifold(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::ExportNetwork(a) => commands::export_network(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = e.record();
            eprintln!("{}", serde_json::to_string(&record).expect("error record serializes"));
            ExitCode::from(record.exit_code)
        }
    }
}
