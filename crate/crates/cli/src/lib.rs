//! Command line front end: index build, scene simulation, localization,
//! evaluation grids and benchmarks driven by one TOML configuration.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures including failed assertions.

pub mod checks;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(sslkit::Error),
    #[error("{0} assertion(s) failed")]
    Assertions(usize),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl From<sslkit::Error> for CliError {
    fn from(e: sslkit::Error) -> Self {
        match e {
            sslkit::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(_) | CliError::Assertions(_) | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sslkit", version, about = "Sound source localization with DSVD-PHAT and GSVD-MUSIC")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, short, global = true)]
    pub jobs: Option<usize>,
    /// Override the simulation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and save the SVD index.
    BuildIndex(BuildIndexArgs),
    /// Render reverberant noisy scenes with ground truth.
    Simulate(SimulateArgs),
    /// Localize every frame of a multichannel WAV file.
    Localize(LocalizeArgs),
    /// Run the SNR by RT60 condition grid and write AUC and ROC tables.
    Evaluate(EvaluateArgs),
    /// Time online per-frame processing and offline construction.
    Bench(BenchArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long, short, default_value = "index.bin")]
    pub out: PathBuf,
    /// Override the energy tolerance.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, short, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, short = 'n', default_value_t = 1)]
    pub count: usize,
    /// SNR in dB; the first configured value when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: Option<f64>,
    /// RT60 in seconds; the first configured value when omitted.
    #[arg(long)]
    pub rt60: Option<f64>,
    /// Anechoic scenes with sources on grid directions at this distance in meters.
    #[arg(long)]
    pub free_field: Option<f64>,
    /// Render without noise.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Input recording with one channel per microphone.
    pub wav: PathBuf,
    #[arg(long, short)]
    pub method: String,
    /// Noise correlation sidecar (.json) or noise-only recording (.wav).
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Prebuilt index; built from the configuration when omitted.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    /// Scene manifest to score the estimates against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, short, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Override the number of scenarios per condition.
    #[arg(long)]
    pub scenarios: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, short, default_value = "bench.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

/// Parse arguments, run the command and map the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.apply_env();
    if let Some(seed) = cli.seed {
        config.sim.seed = seed;
    }
    let work = || match cli.command {
        Command::BuildIndex(a) => commands::build_index(&config, &a).map(|r| println!("{r}")),
        Command::Simulate(a) => commands::simulate(&config, &a).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Localize(a) => commands::localize(&config, &a),
        Command::Evaluate(a) => commands::evaluate(&config, &a),
        Command::Bench(a) => commands::bench(&config, &a),
        Command::Config => config.to_toml().map(|t| print!("{t}")),
    };
    match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(work),
        None => work(),
    }
}
