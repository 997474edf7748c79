//! `wavekey`: dataset synthesis, key generation, watermark training, attacks,
//! evaluation and attribution from the command line.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wavekey_core::Error;

#[derive(Parser, Debug)]
#[command(name = "wavekey", version, about = "Key-based attribution of generative speech models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of keys; overrides `n_keys`.
    #[arg(long)]
    pub n_keys: Option<usize>,
    /// Loss weights: `default`, `surrogate` or `h,q,a`.
    #[arg(long, value_parser = config::parse_lambdas)]
    pub lambdas: Option<wavekey_core::Lambdas>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as 16-bit WAV files.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        d_x: Option<usize>,
        #[arg(long)]
        sample_rate: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a WAV directory and write its manifest.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        wav_dir: PathBuf,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Generate keys and their condition report.
    Keygen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
    },
    /// Train one watermark model per key.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Key file; defaults to `<out>/keys.json`.
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Train robustly against the default attack of this class.
        #[arg(long, conflicts_with = "robust_suite")]
        robust: Option<String>,
        /// Train robustly against an attack suite (JSON).
        #[arg(long)]
        robust_suite: Option<PathBuf>,
    },
    /// Apply a sampled attack to a WAV file.
    Attack {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Attack class: noise, gain, speed, pass-filter, combination.
        #[arg(long, conflicts_with = "suite")]
        kind: Option<String>,
        /// Attack suite (JSON).
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate trained models.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = EvalMode::Standard)]
        mode: EvalMode,
        /// Seed for evaluation sampling and, in ablation/attack mode, training.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        keys: Option<PathBuf>,
        /// Directory of model files; defaults to `<out>/models`.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Apply a trained watermark model to a WAV file.
    Watermark {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Register keys with users in a registry file.
    Register {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// Comma-separated user ids, one per key; defaults to `user-<id>`.
        #[arg(long, value_delimiter = ',')]
        users: Vec<String>,
        /// Directory of model files to reference from the entries.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Attribute a WAV file to a registered user.
    Attribute {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Also write the result as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Summarize evaluation outputs as Markdown.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Standard,
    Ablation,
    Attack,
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_) => EXIT_USAGE,
            Error::Numeric(_) | Error::DegenerateInput(_) => EXIT_NUMERIC,
            Error::Io { .. }
            | Error::Format(_)
            | Error::UnsupportedFormat(_)
            | Error::StaleKeys { .. }
            | Error::Conflict(_)
            | Error::EmptyRegistry
            | Error::VersionConflict { .. }
            | Error::Json(_) => EXIT_DATA,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    use commands as c;
    match cli.command {
        Command::SynthData {
            common,
            n_clips,
            d_x,
            sample_rate,
            seed,
        } => c::synth_data(&common, n_clips, d_x, sample_rate, seed),
        Command::Ingest {
            common,
            wav_dir,
            sample_rate,
        } => c::ingest(&common, &wav_dir, sample_rate),
        Command::Keygen { common, seed } => c::keygen(&common, seed),
        Command::Train {
            common,
            seed,
            keys,
            robust,
            robust_suite,
        } => c::train(&common, seed, keys, robust, robust_suite),
        Command::Attack {
            input,
            output,
            kind,
            suite,
            seed,
        } => c::attack(&input, &output, kind, suite, seed),
        Command::Eval {
            common,
            mode,
            seed,
            keys,
            models,
        } => c::eval(&common, mode, seed, keys, models),
        Command::Watermark {
            model,
            input,
            output,
        } => c::watermark(&model, &input, &output),
        Command::Register {
            registry,
            keys,
            users,
            models,
        } => c::register(&registry, &keys, &users, models),
        Command::Attribute {
            registry,
            wav,
            json,
        } => c::attribute(&registry, &wav, json),
        Command::Report { common } => c::report(&common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
