//! Pipeline driver: a TOML config, one directory per run, and a manifest
//! recording what every stage produced.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;
pub mod sweep;
pub mod synth;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::PipelineConfig;
pub use manifest::RunManifest;
pub use stages::{Run, Stage};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} needs {required} to run first")]
    MissingStage { stage: String, required: String },
    #[error("corrupt manifest {}: {message}", path.display())]
    CorruptManifest { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Runtime(Box<dyn std::error::Error + Send + Sync>),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn runtime(e: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        CliError::Runtime(e.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingStage { .. } => 3,
            _ => 4,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(Box::new(e))
            }
        }
    )*};
}

runtime_from!(
    picl_core::corpus::CorpusError,
    picl_core::encoder::EncoderError,
    picl_core::vecindex::VecIndexError,
    picl_core::retrieval::RetrievalError,
    picl_core::constructor::ConstructorError,
    picl_core::lm::LmError,
    picl_core::eval::EvalError
);

#[derive(Debug, Parser)]
#[command(name = "picl", version, about = "Build retrieval-grouped pre-training data and evaluate in-context learning")]
pub struct Cli {
    /// Worker threads for stage-internal parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Pipeline config. Defaults to the run directory's config.toml.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Directory holding the run's artifacts and manifest.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Dotted-key override, e.g. `--set constructor.delta=-inf`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every stage that has not completed.
    Run(RunArgs),
    BuildCorpus(RunArgs),
    TrainEncoder(RunArgs),
    Embed(RunArgs),
    BuildIndex(RunArgs),
    Retrieve(RunArgs),
    Construct(RunArgs),
    Filter(RunArgs),
    Pretrain(RunArgs),
    Eval(RunArgs),
    Compare(RunArgs),
    /// Rerun the pipeline once per value of one parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Dotted config key or alias (delta, alpha, strategy, k, budget).
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. `--values=-inf,0,0.1`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
    /// Summarize every run under a directory.
    Report { dir: PathBuf },
    /// Write a synthetic corpus, task suite and config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the small preset (fast, for smoke tests).
        #[arg(long)]
        small: bool,
    },
}

/// Load the config named by `args`, falling back to the run dir's copy.
pub fn load_config(args: &RunArgs) -> Result<PipelineConfig, CliError> {
    let path = match &args.config {
        Some(p) => p.clone(),
        None => {
            let p = args.run_dir.join(stages::CONFIG_FILE);
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "no --config given and {} does not exist",
                    p.display()
                )));
            }
            p
        }
    };
    PipelineConfig::load(&path, &args.overrides)
}

fn open_run(args: &RunArgs) -> Result<Run, CliError> {
    let cfg = load_config(args)?;
    cfg.check_paths()?;
    Run::open(&args.run_dir, cfg)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        // Fails only if a pool exists already, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let single = |args: &RunArgs, stage: Stage| -> Result<(), CliError> { open_run(args)?.execute(stage) };
    match cli.command {
        Command::Run(a) => open_run(&a)?.run_missing(),
        Command::BuildCorpus(a) => single(&a, Stage::BuildCorpus),
        Command::TrainEncoder(a) => single(&a, Stage::TrainEncoder),
        Command::Embed(a) => single(&a, Stage::Embed),
        Command::BuildIndex(a) => single(&a, Stage::BuildIndex),
        Command::Retrieve(a) => single(&a, Stage::Retrieve),
        Command::Construct(a) => single(&a, Stage::Construct),
        Command::Filter(a) => single(&a, Stage::Filter),
        Command::Pretrain(a) => single(&a, Stage::Pretrain),
        Command::Eval(a) => single(&a, Stage::Eval),
        Command::Compare(a) => single(&a, Stage::Compare),
        Command::Sweep { run, param, values } => {
            let cfg = load_config(&run)?;
            cfg.check_paths()?;
            let csv = sweep::sweep(&run.run_dir, &cfg, &param, &values)?;
            println!("{}", csv.display());
            Ok(())
        }
        Command::Report { dir } => {
            let (md, _) = report::report(&dir)?;
            print!("{}", std::fs::read_to_string(&md).map_err(|e| CliError::io(&md, e))?);
            Ok(())
        }
        Command::Synth { out, seed, small } => synth::write_synth(&out, seed, small),
    }
}
