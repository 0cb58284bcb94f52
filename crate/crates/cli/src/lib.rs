//! The `cotedit` pipeline: data construction, augmentation, training-signal
//! export, editing, serving and evaluation behind one command line.

pub mod commands;
pub mod config;
pub mod plot;
pub mod serve;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{ConfigError, Overrides, PipelineConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cotedit", version, about = "Chain-of-thought knowledge editing pipeline")]
pub struct Cli {
    /// Pipeline config (TOML). Defaults to ./cotedit.toml when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Backend for this command: scripted[:SCRIPT] or openai[:MODEL].
    #[arg(long, global = true)]
    pub backend: Option<String>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub slice_start: Option<usize>,
    #[arg(long, global = true)]
    pub slice_end: Option<usize>,
    /// Self-evolution reward threshold.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Retrieval depth.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Directory for per-metric bar charts (eval).
    #[arg(long, global = true)]
    pub plot: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate and validate the chain-of-thought SFT corpus.
    BuildData,
    /// Synthesize records from HotpotQA pairs and keep the kb-confirmed ones.
    Augment,
    /// Export SFT examples and trainer hints.
    ExportSft,
    /// Sample, score and export one GRPO round, then evolve the dataset.
    GrpoRound,
    /// Answer one question against the edit memory.
    Edit {
        #[arg(long, required_unless_present = "entity")]
        question: Option<String>,
        #[arg(long, default_value_t = 1)]
        hops: u32,
        /// Sentiment edit: the entity asked about.
        #[arg(long, requires = "sentiment")]
        entity: Option<String>,
        /// Sentiment edit: the edit sentiment sentence.
        #[arg(long)]
        sentiment: Option<String>,
    },
    /// Serve edits over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Evaluate configured datasets.
    Eval {
        /// Dataset name from the config; all datasets when omitted.
        #[arg(long)]
        dataset: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BuildData => "build-data",
            Self::Augment => "augment",
            Self::ExportSft => "export-sft",
            Self::GrpoRound => "grpo-round",
            Self::Edit { .. } => "edit",
            Self::Serve { .. } => "serve",
            Self::Eval { .. } => "eval",
        }
    }

    /// Whether `--backend` selects the data-generation agent rather than the
    /// policy model.
    pub fn uses_agent(&self) -> bool {
        matches!(self, Self::BuildData | Self::Augment)
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

pub(crate) fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

impl Cli {
    /// Flag values, with paths made absolute against the working directory.
    pub fn overrides(&self) -> Result<Overrides, ConfigError> {
        let cwd = std::env::current_dir().map_err(|source| ConfigError::Read {
            path: ".".into(),
            source,
        })?;
        let backend = self.backend.as_ref().map(|b| match b.split_once(':') {
            Some(("scripted", p)) if !p.is_empty() => format!("scripted:{}", cwd.join(p).display()),
            _ => b.clone(),
        });
        Ok(Overrides {
            backend,
            cache_dir: self.cache_dir.as_ref().map(|p| cwd.join(p)),
            out: self.out.as_ref().map(|p| cwd.join(p)),
            slice_start: self.slice_start,
            slice_end: self.slice_end,
            threshold: self.threshold,
            k: self.k,
            seed: self.seed,
        })
    }

    /// Loads, overrides and resolves the config.
    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let (mut config, base) = PipelineConfig::load(self.config.as_deref())?;
        config.apply(&self.overrides()?, self.command.uses_agent())?;
        config.resolve(&base)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Results go to `out`, diagnostics to the log.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{} failed: {e}", cli.command.name());
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = cli.pipeline_config()?;
    log::info!("{}: output in {}", cli.command.name(), config.run.out_dir.display());
    match &cli.command {
        Command::BuildData => commands::build_data(&config, out),
        Command::Augment => commands::augment(&config, out),
        Command::ExportSft => commands::export_sft(&config, out),
        Command::GrpoRound => commands::grpo_round(&config, out),
        Command::Edit {
            question,
            hops,
            entity,
            sentiment,
        } => match (question, entity, sentiment) {
            (_, Some(e), Some(s)) => commands::edit_sentiment(&config, e, s, out),
            (Some(q), _, _) => commands::edit(&config, q, *hops, out),
            _ => Err(CliError::Failed("edit needs --question or --entity with --sentiment".into())),
        },
        Command::Serve { addr } => serve::serve(&config, addr),
        Command::Eval { dataset } => commands::eval(&config, dataset.as_deref(), cli.plot.as_deref(), out),
    }
}
