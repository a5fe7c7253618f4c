//! Subcommand implementations. Each returns `Ok(())` on success or a
//! [`CliError`] carrying the exit code; report files are written before a
//! partial-failure threshold can fire, so a code-4 exit still leaves
//! complete output behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Deserialize;

use trajeval_core::augment::{
    augment_dataset, AugmentOptions, FakeToolMap, RemoteGenerator, StepGenerator,
    TemplateGenerator,
};
use trajeval_core::client::ChatClient;
use trajeval_core::harness::{
    run_episode, AgentPolicy, EpisodePrompts, RegistrySpec, RemoteAgent, RunConfig, ScriptedAgent,
    ToolRegistry,
};
use trajeval_core::meta_eval::{
    load_labeled_dataset, manifest_sidecar_path, run_meta_eval, Dialect, MetaRunOptions,
};
use trajeval_core::report::{
    aggregate_table, aggregate_to_csv_string, evaluate_dataset, plot_csv, plot_rows,
    rows_to_csv_string, EvalReport, EvaluateOptions, ReportError,
};
use trajeval_core::trajectory::{read_ndjson, write_ndjson, Query, Termination, Trajectory};

use crate::config::{build_judge, build_embedder, client_config, AppConfig, BackendConfig};
use crate::CliError;

fn now_stamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn read_input(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    read_ndjson(path).map_err(|e| CliError::Input(e.to_string()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Input(format!("writing {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Input(format!("creating {}: {e}", dir.display())))
}

fn check_threshold(errored: usize, total: usize, max_ratio: f64) -> Result<(), CliError> {
    if total > 0 && errored as f64 / total as f64 > max_ratio {
        return Err(CliError::Threshold { errored, total, max_ratio });
    }
    Ok(())
}

fn parse_dialect(raw: Option<&str>) -> Result<Option<Dialect>, CliError> {
    raw.map(|s| s.parse().map_err(|e: String| CliError::Config(e)))
        .transpose()
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn cmd_evaluate(cfg: &AppConfig, input: &Path, out_dir: &Path) -> Result<(), CliError> {
    let trajectories = read_input(input)?;
    if trajectories.is_empty() {
        return Err(CliError::Input(format!(
            "no trajectories in {}",
            input.display()
        )));
    }
    let judge = build_judge(&cfg.judge, &trajectories)?;
    let embedder = build_embedder(&cfg.embedder)?;
    let opts = EvaluateOptions {
        model: cfg.model.clone(),
        seed: cfg.seed,
        mode: cfg.mode,
        patterns: cfg.patterns.clone(),
        workers: cfg.workers,
        correct_threshold: cfg.correct_threshold,
    };
    let mut report = evaluate_dataset(&trajectories, &*judge, &*embedder, &opts)
        .map_err(|e| match e {
            ReportError::Empty => CliError::Input(e.to_string()),
            other => CliError::Input(other.to_string()),
        })?;
    report.generated_at = Some(now_stamp());

    ensure_dir(out_dir)?;
    let json = report
        .to_json_string()
        .map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out_dir.join("report.json"), &json)?;
    let rows_csv =
        rows_to_csv_string(&report.rows).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out_dir.join("report_rows.csv"), &rows_csv)?;
    let aggregate_csv = aggregate_to_csv_string(&report.aggregate)
        .map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out_dir.join("report_aggregate.csv"), &aggregate_csv)?;

    print!("{}", aggregate_table(std::slice::from_ref(&report)));
    check_threshold(report.aggregate.errored, report.rows.len(), cfg.max_failure_ratio)
}

// ---------------------------------------------------------------------------
// meta-eval
// ---------------------------------------------------------------------------

pub fn cmd_meta_eval(
    cfg: &AppConfig,
    input: &Path,
    dialect: Option<&str>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let forced = parse_dialect(dialect)?;
    let dataset =
        load_labeled_dataset(input, forced).map_err(|e| CliError::Input(e.to_string()))?;
    let judge = build_judge(&cfg.judge, &dataset.trajectories)?;
    let opts = MetaRunOptions { workers: cfg.workers, patterns: cfg.patterns.clone() };
    let report = run_meta_eval(&*judge, &dataset, cfg.mode, &opts);

    ensure_dir(out_dir)?;
    let json = report
        .to_json_string()
        .map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out_dir.join("meta_report.json"), &json)?;
    let csv = report
        .to_csv_string()
        .map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&out_dir.join("meta_report.csv"), &csv)?;

    let show = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "dialect {:?}: acc_hallucination {}  acc_efficiency {}  acc_adaptivity {}  ({} evaluated, {} errored)",
        report.dialect,
        show(report.acc_hallucination),
        show(report.acc_efficiency),
        show(report.acc_adaptivity),
        report.evaluated,
        report.errored,
    );
    check_threshold(report.errored, dataset.trajectories.len(), cfg.max_failure_ratio)
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

pub struct AugmentArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub dialect: Option<String>,
    pub path_limit: usize,
    pub inefficient: usize,
    pub hallucination: usize,
    pub adaptivity: usize,
    pub nonadaptive_ratio: f64,
    pub fake_map: Option<PathBuf>,
    pub no_originals: bool,
    pub generator: BackendConfig,
}

fn build_generator(backend: &BackendConfig) -> Result<Box<dyn StepGenerator>, CliError> {
    match backend.kind.as_deref().unwrap_or("template") {
        "template" => Ok(Box::new(TemplateGenerator)),
        "remote" => {
            let client = ChatClient::new(client_config(backend, "generator")?)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Box::new(RemoteGenerator::new(client)))
        }
        other => Err(CliError::Config(format!(
            "unknown generator kind '{other}' (expected template or remote)"
        ))),
    }
}

pub fn cmd_augment(cfg: &AppConfig, args: &AugmentArgs) -> Result<(), CliError> {
    if args.path_limit == 0 {
        return Err(CliError::Config("path limit must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&args.nonadaptive_ratio) {
        return Err(CliError::Config(format!(
            "nonadaptive_ratio {} outside 0..=1",
            args.nonadaptive_ratio
        )));
    }
    let clean = read_input(&args.input)?;
    if clean.is_empty() {
        return Err(CliError::Input(format!(
            "no trajectories in {}",
            args.input.display()
        )));
    }
    let fake_map = match &args.fake_map {
        None => FakeToolMap::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("fake map {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("fake map {}: {e}", path.display())))?
        }
    };
    let generator = build_generator(&args.generator)?;
    let opts = AugmentOptions {
        dialect: parse_dialect(args.dialect.as_deref())?.unwrap_or(Dialect::MetaGta),
        path_limit: args.path_limit,
        inefficient_per_path: args.inefficient,
        hallucination_per_path: args.hallucination,
        adaptivity_per_path: args.adaptivity,
        nonadaptive_ratio: args.nonadaptive_ratio,
        fake_map,
        seed: cfg.seed,
        keep_originals: !args.no_originals,
        patterns: cfg.patterns.clone(),
    };
    let (augmented, manifest) = augment_dataset(&clean, &*generator, &opts)
        .map_err(|e| CliError::Input(e.to_string()))?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_ndjson(&args.out, &augmented).map_err(|e| CliError::Input(e.to_string()))?;
    let manifest_path = manifest_sidecar_path(&args.out).ok_or_else(|| {
        CliError::Input(format!("cannot derive manifest path for {}", args.out.display()))
    })?;
    manifest
        .save(&manifest_path)
        .map_err(|e| CliError::Input(e.to_string()))?;
    println!(
        "wrote {} trajectories ({} originals, {} augmented) to {}",
        augmented.len(),
        manifest.originals.unwrap_or(0),
        manifest.augmented.unwrap_or(0),
        args.out.display(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub struct RunArgs {
    pub queries: PathBuf,
    pub tools: PathBuf,
    pub out: PathBuf,
    pub agent: BackendConfig,
    pub max_turns: u64,
    pub prompts: Option<PathBuf>,
    pub correct_format: bool,
}

/// Scripted runs map each query id to that episode's raw agent turns.
#[derive(Deserialize)]
#[serde(transparent)]
struct RunScript(BTreeMap<String, Vec<String>>);

enum AgentFactory {
    Scripted(RunScript),
    Remote(BackendConfig),
}

impl AgentFactory {
    fn make(&self, query_id: &str) -> Result<Box<dyn AgentPolicy>, CliError> {
        match self {
            AgentFactory::Scripted(script) => {
                let turns = script.0.get(query_id).cloned().unwrap_or_default();
                Ok(Box::new(ScriptedAgent::new(turns)))
            }
            AgentFactory::Remote(backend) => {
                let client = ChatClient::new(client_config(backend, "agent")?)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok(Box::new(RemoteAgent::new(
                    client,
                    "You are a tool-using assistant; follow the episode instructions exactly.",
                )))
            }
        }
    }
}

pub fn cmd_run(cfg: &AppConfig, args: &RunArgs) -> Result<(), CliError> {
    let queries_text = std::fs::read_to_string(&args.queries)
        .map_err(|e| CliError::Input(format!("queries {}: {e}", args.queries.display())))?;
    let queries: Vec<Query> = serde_json::from_str(&queries_text)
        .map_err(|e| CliError::Input(format!("queries {}: {e}", args.queries.display())))?;
    if queries.is_empty() {
        return Err(CliError::Input(format!(
            "no queries in {}",
            args.queries.display()
        )));
    }
    let spec = RegistrySpec::load(&args.tools).map_err(|e| CliError::Input(e.to_string()))?;
    let registry = ToolRegistry::from_spec(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    let prompts = match &args.prompts {
        Some(dir) => EpisodePrompts::from_dir(dir).map_err(|e| CliError::Config(e.to_string()))?,
        None => EpisodePrompts::default(),
    };
    let run_cfg = RunConfig { max_turns: args.max_turns, ..RunConfig::default() };
    run_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let factory = match args.agent.kind.as_deref().unwrap_or("scripted") {
        "scripted" => {
            let path = args.agent.script.as_ref().ok_or_else(|| {
                CliError::Config("agent kind 'scripted' needs a script file".into())
            })?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("agent script {}: {e}", path.display())))?;
            let script: RunScript = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("agent script {}: {e}", path.display())))?;
            AgentFactory::Scripted(script)
        }
        "remote" => AgentFactory::Remote(args.agent.clone()),
        other => {
            return Err(CliError::Config(format!(
                "unknown agent kind '{other}' (expected scripted or remote)"
            )))
        }
    };

    let mut trajectories = Vec::with_capacity(queries.len());
    for query in &queries {
        let mut agent = factory.make(&query.id)?;
        let mut corrector = if args.correct_format {
            Some(factory.make(&query.id)?)
        } else {
            None
        };
        let t = run_episode(
            &mut *agent,
            corrector.as_deref_mut(),
            query,
            &registry,
            &run_cfg,
            &prompts,
        );
        trajectories.push(t);
    }

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_ndjson(&args.out, &trajectories).map_err(|e| CliError::Input(e.to_string()))?;
    let count_by = |t: Termination| {
        trajectories
            .iter()
            .filter(|x| x.meta.terminated_by == t)
            .count()
    };
    println!(
        "ran {} episodes: {} answered, {} turn-limited, {} aborted",
        trajectories.len(),
        count_by(Termination::Answer),
        count_by(Termination::TurnLimit),
        count_by(Termination::Abort),
    );
    let aborted = count_by(Termination::Abort);
    check_threshold(aborted, trajectories.len(), cfg.max_failure_ratio)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn cmd_report(inputs: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("report {}: {e}", path.display())))?;
        let report = EvalReport::from_json_str(&text)
            .map_err(|e| CliError::Input(format!("report {}: {e}", path.display())))?;
        reports.push(report);
    }
    let rows = plot_rows(&reports);
    let csv = plot_csv(&rows).map_err(|e| CliError::Input(e.to_string()))?;
    let table = aggregate_table(&reports);

    ensure_dir(out_dir)?;
    write_file(&out_dir.join("plot.csv"), &csv)?;
    write_file(&out_dir.join("aggregates.txt"), &table)?;
    print!("{table}");
    Ok(())
}
