//! Command-line front end. `syncd::cli::run` is what the `syncd` binary calls.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

mod commands;
pub mod config;
mod output;
mod selftest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::datagen::DatagenError;
use crate::denoiser::DenoiserError;
use crate::eval::EvalError;
use crate::geometry::GeometryError;
use crate::sampler::SamplerError;

pub use config::RunConfig;
pub use output::{write_png, write_provenance, RunRecord};
pub use selftest::{run_selftest, SelftestReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{failed} self-test invariant(s) failed")]
    Selftest { failed: usize },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "syncd",
    version,
    about = "Consistent image-set generation and reference-conditioned sampling with toy models"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate consistent image sets and write a manifest.
    GenSet(GenSetArgs),
    /// Score sets and keep those passing the aesthetic and similarity rules.
    Filter(FilterArgs),
    /// Train the toy denoiser.
    Train(TrainArgs),
    /// Sample with three-branch guidance.
    Sample(SampleArgs),
    /// Combine alignment scores and report dataset similarity.
    Eval(EvalArgs),
    /// Check the core invariants on small inputs.
    Selftest,
}

#[derive(Debug, Args)]
struct GenSetArgs {
    /// Output directory for the manifest, tensors and previews.
    #[arg(long)]
    out: PathBuf,
    /// Number of sets to generate.
    #[arg(long, default_value_t = 4)]
    sets: usize,
    /// `rigid` or `deformable`.
    #[arg(long)]
    path: Option<String>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warp_fraction: Option<f64>,
    #[arg(long)]
    depth_guidance: Option<f64>,
    #[arg(long)]
    text_guidance: Option<f64>,
    #[arg(long)]
    negative_prompt: Option<String>,
    /// Generate the images of a set independently.
    #[arg(long)]
    no_msa: bool,
    /// Trained checkpoint directory; random weights otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// External captioner: the command receives the instruction on stdin.
    #[arg(long, value_name = "CMD")]
    llm_cmd: Option<String>,
    /// Also write each image's final attention mask as a PGM.
    #[arg(long)]
    dump_mask: bool,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output manifest holding the sets that pass.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    aesthetic_min: Option<f64>,
    #[arg(long)]
    similarity_min: Option<f64>,
    /// `toy` or `cmd:<program>`.
    #[arg(long, default_value = "toy")]
    extractor: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory for the checkpoint and loss curve.
    #[arg(long)]
    out: PathBuf,
    /// Train on a generated manifest instead of freshly rendered scenes.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sets: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// `normalized`, `vanilla` or `rescale`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda_i: Option<f64>,
    #[arg(long)]
    lambda_i_ramp: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long)]
    negative_prompt: Option<String>,
    /// Manifest supplying reference images.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated references: `SET` for all images or `SET/INDEX`.
    #[arg(long, value_delimiter = ',')]
    refs: Vec<String>,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// CSV with `sample_id,text_score,image_score`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Where to write combined scores (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    method: String,
    /// Manifest whose sets get an intra-cluster similarity report.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    extractor: String,
}

/// Everything a subcommand needs besides its own flags.
struct Context {
    config: RunConfig,
    argv: Vec<String>,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SYNCD_LOG", "info"))
        .format_target(false)
        .try_init();
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match execute(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.generation.seed = config.seed;
    let ctx = Context { config, argv };
    let dispatch = move || match cli.command {
        Command::GenSet(args) => commands::gen_set(ctx, args),
        Command::Filter(args) => commands::filter(ctx, args),
        Command::Train(args) => commands::train(ctx, args),
        Command::Sample(args) => commands::sample(ctx, args),
        Command::Eval(args) => commands::eval(ctx, args),
        Command::Selftest => {
            let report = run_selftest();
            for line in &report.lines {
                println!("{line}");
            }
            match report.failed {
                0 => Ok(()),
                failed => Err(CliError::Selftest { failed }),
            }
        }
    };
    match cli.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Config(format!("--jobs {jobs}: {e}")))?
            .install(dispatch),
        None => dispatch(),
    }
}
