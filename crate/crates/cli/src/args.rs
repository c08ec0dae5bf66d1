use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bnndp", version, about = "Certify expectation bounds of Gaussian-posterior Bayesian neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Bound the posterior expectation over an ℓ∞ ball and decide robustness.
    Certify(CertifyArgs),
    /// Search the largest certified ℓ∞ radius around a point.
    Radius(RadiusArgs),
    /// Check bounds against Monte-Carlo estimates on random models.
    Audit(AuditArgs),
    /// Write a random model (or the sine demo) in the model file format.
    GenModel(GenModelArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskArg {
    Auto,
    Regression,
    Classification,
}

#[derive(Args, Debug, Clone)]
pub struct QueryArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated coordinates, or `@path` to a file holding them.
    #[arg(long)]
    pub center: String,
    #[arg(long, value_enum, default_value_t = TaskArg::Auto)]
    pub task: TaskArg,
    /// Regression threshold on the bound width per output.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Main-box mass epsilon; defaults by depth.
    #[arg(long)]
    pub mass_epsilon: Option<f64>,
    /// Piece counts per partitioned layer, complement included.
    #[arg(long, value_delimiter = ',')]
    pub splits: Option<Vec<usize>>,
    /// Class to defend instead of the centre prediction.
    #[arg(long)]
    pub class: Option<usize>,
    /// Skip the logit-margin path for classification.
    #[arg(long)]
    pub no_logit_path: bool,
    /// Monte-Carlo samples for the optional centre check (0 disables).
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long)]
    pub radius: f64,
    /// Radius-search tolerance; echoed in the report.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct RadiusArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 2)]
    pub points: usize,
    #[arg(long)]
    pub hidden_max: Option<usize>,
    #[arg(long)]
    pub width_max: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovArg {
    Diagonal,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DemoArg {
    Sine,
}

#[derive(Args, Debug)]
pub struct GenModelArgs {
    /// Layer widths from input to output, e.g. `2,64,64,3`.
    #[arg(long, value_delimiter = ',', required_unless_present = "demo")]
    pub widths: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    pub task: TaskArg,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, value_enum, default_value_t = CovArg::Diagonal)]
    pub covariance: CovArg,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long)]
    pub var_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub demo: Option<DemoArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
