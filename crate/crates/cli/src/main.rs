//! `idforge`: synthetic face-identity dataset tooling.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use idforge_core::{Error, ErrorClass};

pub const THREADS_ENV: &str = "IDFORGE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "idforge", version, about = "Synthetic identity vectors, perturbations and dataset audits")]
struct Cli {
    /// Log level (error, warn, info, debug)
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit PCA and the latent Gaussian to a feature corpus.
    FitPca(FitPcaArgs),
    /// Sample identity vectors with pairwise cosine below tau.
    SampleIds(SampleIdsArgs),
    /// Draw perturbed variants of each identity vector.
    Perturb(PerturbArgs),
    /// Steer vectors toward pose and quality targets.
    Attrop(AttrOpArgs),
    /// Render vectors to images and embeddings.
    Generate(GenerateArgs),
    /// Audit a dataset: EER, outliers, merges, separability, leakage.
    Audit(AuditArgs),
    /// Fraction of synthetic vectors too close to a reference set.
    Leakage(LeakageArgs),
    /// Run or resume the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args, Debug)]
pub struct FitPcaArgs {
    /// IDV1 corpus; the synthetic corpus is used when omitted
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Seed for the synthetic corpus
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Synthetic corpus rows
    #[arg(long)]
    pub count: Option<usize>,
    /// Synthetic corpus dimension
    #[arg(long)]
    pub dim: Option<usize>,
    /// Retained components (default: all)
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub whiten: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SampleIdsArgs {
    /// Model from fit-pca; a default synthetic model under --seed otherwise
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    #[arg(long)]
    pub max_candidates: Option<usize>,
    /// Unit-normalize candidates before admission
    #[arg(long)]
    pub normalize: bool,
    /// Output IDV1 file; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write sampler statistics as JSON
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long)]
    pub ids: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Variants per identity
    #[arg(long, default_value_t = 50)]
    pub m: usize,
    /// Noise mixture as sigma:fraction pairs
    #[arg(long, default_value = "0.3:0.4,0.5:0.4,0.7:0.2")]
    pub mixture: String,
    #[arg(long, default_value_t = 0.5)]
    pub s_min: f64,
    /// Read sigma as a standard deviation instead of a variance
    #[arg(long)]
    pub sigma_is_std: bool,
    #[arg(long)]
    pub normalize_input: bool,
    /// Directory for id_<i>.idv files and their JSON sidecars
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GradArg {
    Analytic,
    FiniteDifference,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    /// Seed of the toy generator and pose axis
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    #[arg(long, default_value_t = 4.0)]
    pub gain: f64,
}

#[derive(Args, Debug)]
pub struct AttrOpArgs {
    /// Vectors to adjust
    #[arg(long)]
    pub vectors: PathBuf,
    /// Identity vectors: one row for all, or one per input row
    #[arg(long)]
    pub ids: PathBuf,
    #[command(flatten)]
    pub toy: ToyArgs,
    #[arg(long, default_value_t = 60.0)]
    pub target_pose: f64,
    #[arg(long, default_value_t = 27.0)]
    pub target_quality: f64,
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    #[arg(long, value_enum, default_value_t = GradArg::Analytic)]
    pub grad_mode: GradArg,
    #[arg(long, default_value_t = 1e-3)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 1.0)]
    pub grad_clip: f64,
    #[arg(long)]
    pub no_backtracking: bool,
    #[arg(long)]
    pub hinge_quality: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines trace, one record per iteration and row
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Images,
    Embeddings,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub vectors: PathBuf,
    /// Toy generator seed (ignored with --bridge)
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    #[arg(long, default_value_t = 4.0)]
    pub gain: f64,
    /// External adapter command; replaces the toy generator
    #[arg(long)]
    pub bridge: Option<String>,
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Images)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 600)]
    pub timeout: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.3)]
    pub outlier: f64,
    #[arg(long, default_value_t = 0.7)]
    pub merge: f64,
    #[arg(long, default_value_t = 0.4)]
    pub separability: f64,
    #[arg(long, default_value_t = 0.7)]
    pub leakage: f64,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Dataset manifest; embeddings are read relative to it
    #[arg(long, conflicts_with = "ids")]
    pub manifest: Option<PathBuf>,
    /// Identity vectors alone, one embedding per identity
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Reference embeddings for the leakage scan
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[arg(long, default_value_t = 1_000_000)]
    pub impostor_sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub histograms: Option<PathBuf>,
    /// Print the JSON report instead of the summary
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct LeakageArgs {
    #[arg(long)]
    pub synthetic: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Config override, e.g. --set sampler.n=64
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Stop after this stage
    #[arg(long)]
    pub stop_after: Option<String>,
    /// Discard a previous run in the output directory
    #[arg(long)]
    pub fresh: bool,
}

fn report(class: ErrorClass, message: &str) -> ExitCode {
    let line = serde_json::json!({
        "error_class": class.as_str(),
        "exit_code": class.exit_code(),
        "message": message,
    });
    eprintln!("{line}");
    ExitCode::from(class.exit_code() as u8)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(ErrorClass::Usage, e.kind().as_str().unwrap_or("invalid arguments"));
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .parse_env("IDFORGE_LOG")
        .init();
    if let Err(e) = configure_threads() {
        return report(e.class(), &e.to_string());
    }
    let result = match cli.command {
        Command::FitPca(a) => commands::fit_pca(a),
        Command::SampleIds(a) => commands::sample_ids(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Attrop(a) => commands::attrop(a),
        Command::Generate(a) => commands::generate(a),
        Command::Audit(a) => commands::audit(a),
        Command::Leakage(a) => commands::leakage(a),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.class(), &e.to_string()),
    }
}
