//! Command-line pipeline: `synth`, `train`, `generate`, `evaluate` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or format,
//! 4 missing dependency, 5 numeric failure.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use reactdiff::Error;

pub use config::RunConfig;

pub const SEED_ENV: &str = "REACTDIFF_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::GradcheckFailed(_) => 5,
            CliError::Core(e) => match e {
                Error::Config(_) => 2,
                Error::Format { .. } | Error::Data(_) | Error::Compatibility { .. } | Error::Io { .. } => 3,
                Error::Dependency(_) => 4,
                Error::Numerics(_) => 5,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "reactdiff", version, about = "Multiple appropriate facial reaction generation")]
pub struct Cli {
    /// Flat JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the configured seed (and REACTDIFF_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub generated_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test splits and a manifest.
    Synth {
        /// `desk` or `paper`.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        n_frames: Option<usize>,
    },
    /// Train the transformer (stage 1) or the diffusion model (stage 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Overrides the configured epoch count for this stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sample reactions for every clip of a split.
    Generate {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        alpha: Option<usize>,
    },
    /// Score generated reactions or a naive baseline.
    Evaluate {
        /// b_random, b_mime, b_meanseq or b_meanfr.
        #[arg(long, conflicts_with = "generated", required_unless_present = "generated")]
        baseline: Option<String>,
        /// Directory written by `generate`.
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        alpha: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        l_max: Option<usize>,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        /// Scale the backward rule of this primitive (negative control).
        #[arg(long)]
        corrupt: Option<String>,
    },
}

impl Cli {
    /// The configuration after applying the file, environment and flags.
    pub fn resolve(&self, env_seed: Option<&str>) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = env_seed {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let dirs = [
            (&mut cfg.data_dir, &self.data_dir),
            (&mut cfg.checkpoint_dir, &self.checkpoint_dir),
            (&mut cfg.generated_dir, &self.generated_dir),
            (&mut cfg.report_dir, &self.report_dir),
        ];
        for (slot, flag) in dirs {
            if let Some(p) = flag {
                *slot = p.clone();
            }
        }
        Ok(cfg)
    }
}

/// Parses `args` and runs the command, writing progress to `out`.
pub fn run_with(args: &[String], env_seed: Option<&str>, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string().trim_end().to_string())),
    };
    let cfg = cli.resolve(env_seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(match cli.jobs {
            Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
            Some(n) => n,
            None => 0,
        })
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg, out))
}

/// Entry point for the binary: returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let env_seed = std::env::var(SEED_ENV).ok();
    let mut out = std::io::stdout();
    match run_with(&args, env_seed.as_deref(), &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
