//! `activehar`: preprocess a dataset, train leave-one-user-out baselines,
//! run active-learning cells and sweeps, time the pipeline, and serve the
//! labeling API.
//!
//! Progress goes to stderr; results go to files under `--out` and, for
//! `active` and `bench`, a JSON document on stdout. Every command writes the
//! resolved configuration next to its outputs.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 bad input data,
//! 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use activehar::acquire::AcquisitionFn;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "activehar",
    version,
    about = "Bayesian active learning for activity recognition"
)]
pub struct Cli {
    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (TOML key tree).
    #[arg(long, global = true, value_name = "FILE")]
    pub plan: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest a dataset manifest into a window store.
    Prep {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one baseline per held-out user.
    Baseline {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One active-learning cell for one user.
    Active {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        user: String,
        #[arg(long)]
        eta: f64,
        #[arg(long = "fn", value_parser = parse_fn)]
        function: AcquisitionFn,
        #[arg(long, value_enum, default_value_t = OracleKind::Simulated)]
        oracle: OracleKind,
        /// Port of the labeling API with `--oracle http`.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every (user, seed, function, eta) cell of the plan.
    Sweep {
        #[arg(long)]
        store: Option<PathBuf>,
        /// Directory of `model_<user>.bin` baselines to start from.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-window timing of each pipeline stage.
    Bench {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Windows in the timed pool.
        #[arg(long, default_value_t = 100)]
        windows: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the labeling API (and optionally the UI) for live sessions.
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Static files (the labeling UI) served for unmatched paths.
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Ground-truth labels of the store.
    Simulated,
    /// A person answering through the labeling API.
    Http,
}

fn parse_fn(s: &str) -> Result<AcquisitionFn, String> {
    s.parse().map_err(|e: activehar::Error| e.to_string())
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<activehar::Error> for Failure {
    fn from(e: activehar::Error) -> Self {
        let msg = e.to_string();
        if matches!(e, activehar::Error::Config(_)) {
            Failure::Usage(msg)
        } else if e.is_data_error() {
            Failure::Data(msg)
        } else {
            Failure::Runtime(msg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp_secs()
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().lines().next().unwrap_or_default());
            ExitCode::from(f.code())
        }
    }
}
