//! `engine`: ingest corpora, build toolkits, run and score diagnostic
//! sessions, evaluate protocols and serve the session API.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.
//!
//! Configuration precedence, highest first: command-line flags (including
//! `--set key=value`), `ENGINE_*` environment variables, the `--config` TOML
//! file, built-in defaults.

mod commands;
mod config;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

const AFTER_HELP: &str = "\
Configuration precedence (highest first): flags and --set, ENGINE_* environment \
variables, the --config file, defaults.
Environment: ENGINE_PROFILE, ENGINE_CORPUS, ENGINE_TOOLKITS, ENGINE_SEED, \
ENGINE_PARALLELISM, ENGINE_MAX_ROUNDS, ENGINE_BACKEND, ENGINE_BACKEND_URL, \
ENGINE_INTERPRETER_URL, ENGINE_REASONER_URL, ENGINE_EXAM_ORACLE_URL, \
ENGINE_BACKEND_TOKEN, ENGINE_WORLD, ENGINE_SERVICE_TOKEN.
Exit codes: 0 success, 1 domain error, 2 usage error.";

#[derive(Debug, Parser)]
#[command(name = "engine", version, about = "Evidence-seeking slide diagnosis engine", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set protocol.max_rounds=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_key_value)]
    pub set: Vec<(String, String)>,
    /// Embedding corpus directory (config key `corpus`).
    #[arg(long, global = true, value_name = "DIR")]
    pub embeddings: Option<PathBuf>,
    /// Toolkit directory (config key `toolkits`).
    #[arg(long, global = true, value_name = "DIR")]
    pub toolkits: Option<PathBuf>,
    /// Worker threads for batch runs (config key `parallelism`).
    #[arg(long, short = 'j', global = true)]
    pub parallelism: Option<usize>,
    /// Emit schema-versioned JSON records instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output on stderr; repeat for more.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if k.trim().is_empty() {
        return Err("empty key".into());
    }
    Ok((k.trim().to_string(), v.to_string()))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an embedding corpus and print its inventory.
    Ingest {
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        /// Fail when any slide lacks patches at some declared level.
        #[arg(long)]
        check: bool,
    },
    /// Build or inspect prototype toolkits.
    #[command(subcommand)]
    Toolkit(ToolkitCommand),
    /// Screen one slide with a toolkit and an RoI plan.
    Highlight {
        #[arg(long)]
        slide: String,
        #[arg(long, default_value = "pan-cancer")]
        toolkit: String,
        /// Plan such as `top3@10x+top3@20x+rand2@10x`.
        #[arg(long, default_value = "top3@10x+top3@20x+rand2@10x")]
        plan: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one diagnostic session and write its log.
    Run(RunArgs),
    /// Score reasoner replies against a ground-truth diagnosis.
    Score {
        /// A raw reply, or a session log whose reasoner turns are scored in order.
        #[arg(long, value_name = "FILE")]
        transcript: PathBuf,
        /// File whose first non-empty line is the true diagnosis.
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        /// Rank temperature (0.5 before examination results, 2 after).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate a fixture corpus under one protocol.
    Eval {
        /// Directory of case JSON files, or a data root holding `cases/`.
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "es")]
        protocol: ProtocolArg,
        /// Write the JSON report here.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
        /// Write per-case session logs here.
        #[arg(long, value_name = "DIR")]
        logs: Option<PathBuf>,
    },
    /// Rerun evaluation over a grid of settings along one axis.
    Ablate {
        /// evidence-sources, roi-plan or icl-count.
        #[arg(long)]
        axis: String,
        /// Comma-separated cells, e.g. `FF,TF,FT,TT`; the axis default when omitted.
        #[arg(long)]
        grid: Option<String>,
        /// Fixture corpus; a 10-case synthetic bench when omitted.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "es")]
        protocol: ProtocolArg,
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Serve the session API over HTTP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
        /// Bearer token required on every request except health.
        #[arg(long)]
        token: Option<String>,
        #[arg(long, value_enum, default_value = "interactive")]
        mode: ModeArg,
    },
    /// Write a synthetic data root: corpus, toolkits, cases and world.json.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        cases: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the three worked cases with their backend scripts instead.
        #[arg(long)]
        worked: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ToolkitCommand {
    /// Build toolkits from recipes against a library corpus.
    Build {
        /// JSON array of toolkit recipes; the bundled recipes when omitted.
        #[arg(long, value_name = "FILE")]
        recipes: Option<PathBuf>,
        /// Corpus holding the support patches (defaults to the configured corpus).
        #[arg(long, value_name = "DIR")]
        library: Option<PathBuf>,
        /// Output directory (defaults to the configured toolkit directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Describe the toolkits in a directory.
    Inspect {
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
        /// Only this toolkit.
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Case JSON: `case_id`, `case_info`, optional `slide_id` and `script`.
    #[arg(long, value_name = "FILE")]
    pub case: PathBuf,
    /// Slide id; overrides the case file.
    #[arg(long)]
    pub slide: Option<String>,
    #[arg(long, value_enum, default_value = "oracle")]
    pub mode: ModeArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON object of exam name to result, used in interactive mode.
    #[arg(long, value_name = "FILE")]
    pub exams: Option<PathBuf>,
    /// Session log path; `<case_id>.jsonl` in the working directory when omitted.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
    /// Backend script to replay instead of live backends.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Op,
    Es,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Interactive,
    Oracle,
}

fn init_tracing(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_env("ENGINE_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_tracing(cli.global.verbose);
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
