use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

#[derive(Debug, Parser)]
#[command(name = "multispde", version, about = "Multivariate SPDE random fields on planar meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Triangulate a rectangle and write the mesh as JSON.
    Mesh(MeshArgs),
    /// Draw a latent field (and optionally noisy observations of it).
    Sample(SampleArgs),
    /// Correlation surfaces between all field pairs at a reference vertex.
    Corr(CorrArgs),
    /// Power and cross spectra of a triangular system.
    Spectra(SpectraArgs),
    /// Posterior-mode fit of the SPDE parameters.
    Fit(FitArgs),
    /// Conditional means (and variances) at target locations.
    Predict(PredictArgs),
    /// Iterative nugget bias correction.
    Nugget(NuggetArgs),
    /// Matern parameters matched to a triangular system.
    Match(MatchArgs),
    /// Hold-out comparison of the SPDE and dense Matern pipelines.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// System spec as JSON (a fit output is accepted too).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Named built-in spec.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct MeshArgs {
    /// Rectangle as x0,y0,x1,y1.
    #[arg(long, value_delimiter = ',', required = true)]
    pub region: Vec<f64>,
    #[arg(long)]
    pub edge: f64,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Also write C.mtx and G.mtx (Matrix Market) into this directory.
    #[arg(long)]
    pub fem_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random locations at which every field is observed.
    #[arg(long, requires = "nugget")]
    pub observations: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub nugget: Option<Vec<f64>>,
    #[arg(long, requires = "observations")]
    pub obs_out: Option<PathBuf>,
    /// Write the precision matrix in Matrix Market format.
    #[arg(long)]
    pub precision_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long, conflicts_with = "at")]
    pub vertex: Option<usize>,
    /// Reference point x,y; the nearest vertex is used.
    #[arg(long, value_delimiter = ',')]
    pub at: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0.01)]
    pub k_min: f64,
    #[arg(long, default_value_t = 100.0)]
    pub k_max: f64,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Per-field nugget variances; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub nugget: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub nugget: Vec<f64>,
    /// CSV with columns x,y,field.
    #[arg(long)]
    pub targets: PathBuf,
    /// Also report posterior variances.
    #[arg(long)]
    pub variance: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NuggetArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Initial per-field nugget variances.
    #[arg(long, value_delimiter = ',', required = true)]
    pub tau2: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Use plug-in residuals instead of leave-one-out.
    #[arg(long)]
    pub plug_in: bool,
    /// Fit θ only once, at the initial nugget.
    #[arg(long)]
    pub no_refit: bool,
    /// Write the final loop state as JSON.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub nugget: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.25)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum Failure {
    Core(multispde::Error),
    Numeric(String),
}

impl From<multispde::Error> for Failure {
    fn from(e: multispde::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) if e.is_input_error() => 2,
            _ => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Numeric(m) => write!(f, "{m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mesh(a) => commands::mesh(a),
        Command::Sample(a) => commands::sample(a),
        Command::Corr(a) => commands::corr(a),
        Command::Spectra(a) => commands::spectra(a),
        Command::Fit(a) => commands::fit(a),
        Command::Predict(a) => commands::predict(a),
        Command::Nugget(a) => commands::nugget(a),
        Command::Match(a) => commands::matched(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
