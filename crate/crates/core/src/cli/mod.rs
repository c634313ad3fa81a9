//! The `screject` command line.
//!
//! Every subcommand accepts `--config FILE`, a flat `key=value` file whose
//! keys are long flag names. Flags given on the command line win over the
//! file.

mod commands;
pub mod svg;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::manifest::Manifest;
use crate::normalization::ShiftMode;
use crate::scores::ScoreKind;
use crate::Error;

pub use commands::{cmd_analyze, cmd_eval, cmd_rc, cmd_repro, cmd_train};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_TRAINING: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_CRITERIA: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("{0}")]
    CriteriaFailed(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } => EXIT_IO,
            CliError::CriteriaFailed(_) => EXIT_CRITERIA,
            CliError::Core(e) => match e {
                Error::InvalidInput(_) | Error::InvalidConfig(_) => EXIT_USAGE,
                Error::Diverged { .. } => EXIT_TRAINING,
                Error::Degenerate(_)
                | Error::Parse { .. }
                | Error::Format(_)
                | Error::Io { .. } => EXIT_IO,
            },
        }
    }

    /// Attaches the offending file to data errors raised while reading it.
    pub(crate) fn in_file(path: &Path, e: Error) -> Self {
        match e {
            Error::Parse { .. } | Error::Io { .. } => CliError::Core(e),
            Error::Format(msg) | Error::Degenerate(msg) | Error::InvalidInput(msg) => {
                CliError::Data {
                    path: path.to_path_buf(),
                    msg,
                }
            }
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "screject",
    version,
    about = "Selective classification with label-smoothed models"
)]
pub struct Cli {
    /// key=value file of flag defaults; command-line flags take precedence
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train CE/LS models on the synthetic mixture and dump their logits
    Train(TrainArgs),
    /// Selective-classification metrics of a logit file
    Eval(EvalArgs),
    /// Risk-coverage tables and an overlay plot
    Rc(RcArgs),
    /// Conditional logit statistics and the shift-mix report
    Analyze(AnalyzeArgs),
    /// Run the full CE vs LS experiment and judge the directional checks
    Repro(ReproArgs),
}

/// Dataset and optimiser settings shared by `train` and `repro`. Unset
/// values fall back to the experiment defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// Number of mixture components on the circle
    #[arg(long)]
    pub classes: Option<usize>,
    /// Circle radius of the component means
    #[arg(long)]
    pub radius: Option<f64>,
    /// Shared component standard deviation
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_eval: Option<usize>,
    #[arg(long)]
    pub n_shift: Option<usize>,
    /// Length of the distribution shift in units of sigma
    #[arg(long)]
    pub shift_sigmas: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Output directory; one subdirectory per model
    #[arg(long)]
    pub out: PathBuf,
    /// Smoothing coefficients, comma separated (0 is plain cross entropy)
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub alphas: Vec<f64>,
    /// Experiment seed; fixes all datasets and the initialisation
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Debug, Clone, Args)]
pub struct NormArgs {
    /// Candidate norm orders for the validation search
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub p_grid: Vec<f64>,
    /// Logit shift before normalising: mean or none
    #[arg(long, default_value = "mean")]
    pub shift_mode: ShiftMode,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Logit file to evaluate
    #[arg(long)]
    pub logits: PathBuf,
    /// Validation logit file (needed by maxlogit-norm)
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// msp, entropy, doctor, energy or maxlogit-norm
    #[arg(long, default_value = "msp")]
    pub score: ScoreKind,
    /// Risk targets for coverage@risk
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    pub risks: Vec<f64>,
    /// Coverage targets for risk@coverage
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.8")]
    pub coverages: Vec<f64>,
    /// Write the metric table here as well as printing it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Decimal places in tables
    #[arg(long, default_value_t = 6)]
    pub precision: usize,
    #[command(flatten)]
    pub norm: NormArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RcArgs {
    /// Logit files, one curve each (repeat the flag)
    #[arg(long, required = true)]
    pub logits: Vec<PathBuf>,
    /// Legend labels in input order; defaults to manifest labels
    #[arg(long)]
    pub label: Vec<String>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// msp, entropy, doctor, energy or maxlogit-norm
    #[arg(long, default_value = "msp")]
    pub score: ScoreKind,
    /// Norm order for maxlogit-norm
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value = "mean")]
    pub shift_mode: ShiftMode,
    /// Log-scale coverage axis
    #[arg(long)]
    pub log_coverage: bool,
    /// Omit the timestamp from SVG output
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 6)]
    pub precision: usize,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Logit file with labels
    #[arg(long)]
    pub logits: PathBuf,
    /// Further logit files pooled for the shift-mix report; records tagged
    /// "shift" count as shifted
    #[arg(long)]
    pub shift: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Sliding window width
    #[arg(long, default_value_t = 0.05)]
    pub window: f64,
    /// Window step; defaults to window/5
    #[arg(long)]
    pub step: Option<f64>,
    /// Minimum samples for a window statistic
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    /// Norm order for the normalised max logit and the sorted-logit powers
    #[arg(long, default_value_t = 5.0)]
    pub p: f64,
    #[arg(long, default_value = "mean")]
    pub shift_mode: ShiftMode,
    /// MSP bin edges for the normalised max-logit statistics
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    pub bins: Vec<f64>,
    /// Drop samples further than this many std from the bin mean max logit
    #[arg(long, default_value_t = 3.0)]
    pub clip_sigmas: f64,
    /// Pooled coverage for the shift-mix report
    #[arg(long)]
    pub coverage: Option<f64>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 6)]
    pub precision: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReproArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of seeds (0, 1, ...)
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Smaller datasets and fewer epochs; verdicts are advisory only
    #[arg(long)]
    pub quick: bool,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, default_value_t = 6)]
    pub precision: usize,
}

/// Tokens for the config-file entries whose flags were not given on the
/// command line.
fn config_tokens(
    cmd: &clap::Command,
    matches: &clap::ArgMatches,
    config: &Manifest,
) -> CliResult<Vec<OsString>> {
    let mut tokens = Vec::new();
    for (key, value) in config.entries() {
        let key = key.replace('_', "-");
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .filter(|a| a.get_id() != "config")
            .ok_or_else(|| CliError::Usage(format!("unknown config key '{key}'")))?;
        if matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        if arg.get_action().takes_values() {
            tokens.push(format!("--{key}").into());
            tokens.push(value.into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => tokens.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "config key '{key}': expected a boolean, got '{other}'"
                    )))
                }
            }
        }
    }
    Ok(tokens)
}

fn parse_with_config(args: Vec<OsString>) -> std::result::Result<CliResult<Cli>, clap::Error> {
    let root = Cli::command();
    let matches = root.clone().try_get_matches_from(&args)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let Some(path) = cli.config.clone() else {
        return Ok(Ok(cli));
    };
    let config = match Manifest::read(&path) {
        Ok(c) => c,
        Err(e) => return Ok(Err(e.into())),
    };
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = root.find_subcommand(name).expect("known subcommand");
    let extra = match config_tokens(sub, sub_matches, &config) {
        Ok(t) => t,
        Err(e) => return Ok(Err(e)),
    };
    let mut merged = args;
    merged.extend(extra);
    let matches = Cli::command().try_get_matches_from(merged)?;
    Ok(Ok(Cli::from_arg_matches(&matches)?))
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Rc(a) => cmd_rc(&a, out),
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::Repro(a) => cmd_repro(&a, out),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Normal output goes to `out`, diagnostics
/// to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse_with_config(args) {
        Ok(Ok(cli)) => cli,
        Ok(Err(e)) => {
            let _ = writeln!(err, "error: {e}");
            return e.exit_code();
        }
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
