//! `trajeval` — evaluate tool-using agent trajectories: answer accuracy
//! plus reasoning quality (evidence efficiency, hallucination reduction,
//! failure adaptivity), meta-evaluation of the judge itself, labeled
//! dataset augmentation, and a mock-tool episode runner.
//!
//! Configuration is layered: TOML file, then `TRAJEVAL_*` environment
//! variables, then flags. Exit codes: 0 success, 2 configuration error,
//! 3 input error, 4 partial-failure threshold exceeded.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{AugmentArgs, RunArgs};
use config::{collect_env, load_file_config, BackendConfig, FileConfig, FlagOverrides};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration (exit 2): unusable flags, files, or backends.
    Config(String),
    /// Bad input data (exit 3): unreadable or invalid datasets.
    Input(String),
    /// Too many per-item failures (exit 4); output files are already
    /// written when this fires.
    Threshold { errored: usize, total: usize, max_ratio: f64 },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(detail) => write!(f, "{detail}"),
            CliError::Input(detail) => write!(f, "{detail}"),
            CliError::Threshold { errored, total, max_ratio } => write!(
                f,
                "{errored} of {total} items failed, exceeding max_failure_ratio {max_ratio}"
            ),
        }
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Threshold { .. } => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Threshold { .. } => "partial_failure",
        }
    }

    /// One-line machine-readable error report for stderr.
    pub fn report(&self) -> String {
        serde_json::json!({
            "error": {
                "code": self.code(),
                "kind": self.kind(),
                "detail": self.to_string(),
            }
        })
        .to_string()
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "trajeval",
    version,
    about = "Evaluate tool-using agent trajectories: answer accuracy plus reasoning quality"
)]
struct Cli {
    /// TOML configuration file (or set TRAJEVAL_CONFIG); environment
    /// variables and flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomness (augmentation path sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-trajectory scoring.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Evidence rendering for the judge: with_bank or full_dialog.
    #[arg(long, global = true)]
    mode: Option<String>,

    /// Model alias recorded in reports.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Exit 4 when the errored fraction exceeds this ratio (default 0).
    #[arg(long, global = true)]
    max_failure_ratio: Option<f64>,

    /// Judge backend: label_oracle, flipped_oracle, script, or remote.
    #[arg(long, global = true)]
    judge: Option<String>,

    /// Scripted-judge declaration file (for --judge script).
    #[arg(long, global = true)]
    judge_script: Option<PathBuf>,

    #[arg(long, global = true)]
    judge_url: Option<String>,

    #[arg(long, global = true)]
    judge_model: Option<String>,

    /// Environment variable naming the judge's bearer token.
    #[arg(long, global = true)]
    judge_auth_env: Option<String>,

    /// Directory overriding the judge prompt templates.
    #[arg(long, global = true)]
    judge_prompts: Option<PathBuf>,

    /// Embedder backend: bag_of_tokens or remote.
    #[arg(long, global = true)]
    embedder: Option<String>,

    #[arg(long, global = true)]
    embedder_url: Option<String>,

    #[arg(long, global = true)]
    embedder_model: Option<String>,

    /// Environment variable naming the embedder's bearer token.
    #[arg(long, global = true)]
    embedder_auth_env: Option<String>,

    /// Extra failure substring, added to the defaults (repeatable).
    #[arg(long = "failure-pattern", global = true)]
    failure_patterns: Vec<String>,

    /// Extra failure regex, added to the defaults (repeatable).
    #[arg(long = "failure-regex", global = true)]
    failure_regexes: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a trajectory dataset and write JSON/CSV reports.
    Evaluate {
        /// NDJSON trajectory dataset.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving report.json, report_rows.csv, and
        /// report_aggregate.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score the judge itself against a labeled dataset.
    MetaEval {
        /// NDJSON labeled dataset (optionally with a header line or a
        /// manifest sidecar).
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving meta_report.json and meta_report.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// Force the dataset dialect (meta_gta or meta_mms) instead of
        /// auto-detecting.
        #[arg(long)]
        dialect: Option<String>,
    },
    /// Inject labeled defects into clean trajectories.
    Augment {
        /// NDJSON clean dataset.
        #[arg(long)]
        input: PathBuf,
        /// Output NDJSON path; the manifest lands beside it.
        #[arg(long)]
        out: PathBuf,
        /// Dataset dialect to produce (default meta_gta).
        #[arg(long)]
        dialect: Option<String>,
        /// Cap on enumerated step orders per clean trajectory.
        #[arg(long, default_value_t = 3)]
        path_limit: usize,
        /// Inefficient-step injections per path.
        #[arg(long, default_value_t = 1)]
        inefficient: usize,
        /// Hallucinated-thought injections per path.
        #[arg(long, default_value_t = 1)]
        hallucination: usize,
        /// Fake-tool failure injections per path.
        #[arg(long, default_value_t = 1)]
        adaptivity: usize,
        /// Chance an injected failure is followed by a verbatim
        /// (non-adaptive) retry.
        #[arg(long, default_value_t = 0.5)]
        nonadaptive_ratio: f64,
        /// JSON file mapping real tools to fake twins; defaults to the
        /// built-in pairs.
        #[arg(long)]
        fake_map: Option<PathBuf>,
        /// Drop the unmodified originals from the output.
        #[arg(long)]
        no_originals: bool,
        /// Thought generator: template (offline) or remote.
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        generator_url: Option<String>,
        #[arg(long)]
        generator_model: Option<String>,
        /// Environment variable naming the generator's bearer token.
        #[arg(long)]
        generator_auth_env: Option<String>,
    },
    /// Run ReAct episodes for a query file against a mock tool registry.
    Run {
        /// JSON array of queries.
        #[arg(long)]
        queries: PathBuf,
        /// Tool registry spec (definitions plus mock executors).
        #[arg(long)]
        tools: PathBuf,
        /// Output NDJSON path for the recorded trajectories.
        #[arg(long)]
        out: PathBuf,
        /// Agent backend: scripted or remote.
        #[arg(long)]
        agent: Option<String>,
        /// JSON object mapping query ids to scripted raw turns.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        agent_url: Option<String>,
        #[arg(long)]
        agent_model: Option<String>,
        /// Environment variable naming the agent's bearer token.
        #[arg(long)]
        agent_auth_env: Option<String>,
        /// Tool-call turns before an episode is cut off.
        #[arg(long, default_value_t = 10)]
        max_turns: u64,
        /// Directory overriding the episode prompt templates.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Give malformed turns one corrector round-trip.
        #[arg(long)]
        correct_format: bool,
    },
    /// Merge evaluation reports into a plot CSV and a text table.
    Report {
        /// Report JSON files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory receiving plot.csv and aggregates.txt.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn flags_from(cli: &Cli) -> FlagOverrides {
    FlagOverrides {
        seed: cli.seed,
        workers: cli.workers,
        mode: cli.mode.clone(),
        model: cli.model.clone(),
        max_failure_ratio: cli.max_failure_ratio,
        judge: BackendConfig {
            kind: cli.judge.clone(),
            url: cli.judge_url.clone(),
            model: cli.judge_model.clone(),
            auth_env: cli.judge_auth_env.clone(),
            script: cli.judge_script.clone(),
            prompts: cli.judge_prompts.clone(),
            ..BackendConfig::default()
        },
        embedder: BackendConfig {
            kind: cli.embedder.clone(),
            url: cli.embedder_url.clone(),
            model: cli.embedder_model.clone(),
            auth_env: cli.embedder_auth_env.clone(),
            ..BackendConfig::default()
        },
        failure_substrings: cli.failure_patterns.clone(),
        failure_regexes: cli.failure_regexes.clone(),
    }
}

fn config_path(cli: &Cli) -> Option<PathBuf> {
    cli.config
        .clone()
        .or_else(|| std::env::var("TRAJEVAL_CONFIG").ok().map(PathBuf::from))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let file = match config_path(&cli) {
        Some(path) => load_file_config(&path)?,
        None => FileConfig::default(),
    };
    let env = collect_env();
    let flags = flags_from(&cli);
    let cfg = config::resolve(&file, &env, &flags)?;

    match cli.command {
        Command::Evaluate { input, out_dir } => commands::cmd_evaluate(&cfg, &input, &out_dir),
        Command::MetaEval { input, out_dir, dialect } => {
            commands::cmd_meta_eval(&cfg, &input, dialect.as_deref(), &out_dir)
        }
        Command::Augment {
            input,
            out,
            dialect,
            path_limit,
            inefficient,
            hallucination,
            adaptivity,
            nonadaptive_ratio,
            fake_map,
            no_originals,
            generator,
            generator_url,
            generator_model,
            generator_auth_env,
        } => commands::cmd_augment(
            &cfg,
            &AugmentArgs {
                input,
                out,
                dialect,
                path_limit,
                inefficient,
                hallucination,
                adaptivity,
                nonadaptive_ratio,
                fake_map,
                no_originals,
                generator: BackendConfig {
                    kind: generator,
                    url: generator_url,
                    model: generator_model,
                    auth_env: generator_auth_env,
                    ..BackendConfig::default()
                },
            },
        ),
        Command::Run {
            queries,
            tools,
            out,
            agent,
            script,
            agent_url,
            agent_model,
            agent_auth_env,
            max_turns,
            prompts,
            correct_format,
        } => commands::cmd_run(
            &cfg,
            &RunArgs {
                queries,
                tools,
                out,
                agent: BackendConfig {
                    kind: agent,
                    url: agent_url,
                    model: agent_model,
                    auth_env: agent_auth_env,
                    script,
                    ..BackendConfig::default()
                },
                max_turns,
                prompts,
                correct_format,
            },
        ),
        Command::Report { inputs, out_dir } => commands::cmd_report(&inputs, &out_dir),
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = execute(cli) {
        eprintln!("{}", err.report());
        std::process::exit(err.code());
    }
}
