//! Layered application configuration: built-in defaults, then a TOML file,
//! then `TRAJEVAL_*` environment variables, then command-line flags — later
//! layers win. Secrets are never part of the configuration; backends that
//! need a bearer token are given the *name* of the environment variable
//! holding it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Deserialize;

use trajeval_core::client::{ChatClient, ChatClientConfig};
use trajeval_core::embedding::{BagOfTokensEmbedder, Embedder, RemoteEmbedder};
use trajeval_core::failure::FailurePatterns;
use trajeval_core::judge::{EvidenceMode, Judge, PromptSet, RemoteJudge, ScriptedJudge};
use trajeval_core::trajectory::Trajectory;

use crate::CliError;

pub const ENV_PREFIX: &str = "TRAJEVAL_";

// ---------------------------------------------------------------------------
// Raw layers
// ---------------------------------------------------------------------------

/// Shape of the TOML configuration file; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mode: Option<String>,
    pub model: Option<String>,
    pub max_failure_ratio: Option<f64>,
    pub correct_threshold: Option<f64>,
    /// Extra failure substrings, added to the built-in defaults.
    pub failure_substrings: Option<Vec<String>>,
    pub failure_regexes: Option<Vec<String>>,
    pub judge: Option<BackendConfig>,
    pub embedder: Option<BackendConfig>,
}

/// One backend's connection settings. `kind` selects the implementation;
/// the rest applies only where it makes sense (a scripted judge has a
/// `script`, a remote one a `url` and `model`).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: Option<String>,
    pub url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub script: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub timeout_secs: Option<u64>,
    pub max_attempts: Option<u32>,
}

impl BackendConfig {
    fn merge_over(&mut self, other: &BackendConfig) {
        let take = |slot: &mut Option<String>, value: &Option<String>| {
            if value.is_some() {
                *slot = value.clone();
            }
        };
        take(&mut self.kind, &other.kind);
        take(&mut self.url, &other.url);
        take(&mut self.model, &other.model);
        take(&mut self.auth_env, &other.auth_env);
        if other.script.is_some() {
            self.script = other.script.clone();
        }
        if other.prompts.is_some() {
            self.prompts = other.prompts.clone();
        }
        if other.timeout_secs.is_some() {
            self.timeout_secs = other.timeout_secs;
        }
        if other.max_attempts.is_some() {
            self.max_attempts = other.max_attempts;
        }
    }
}

/// Values carried by command-line flags; the outermost layer.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub mode: Option<String>,
    pub model: Option<String>,
    pub max_failure_ratio: Option<f64>,
    pub judge: BackendConfig,
    pub embedder: BackendConfig,
    pub failure_substrings: Vec<String>,
    pub failure_regexes: Vec<String>,
}

// ---------------------------------------------------------------------------
// Resolution
// ---------------------------------------------------------------------------

/// Fully resolved configuration all subcommands run from.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub seed: u64,
    pub workers: usize,
    pub mode: EvidenceMode,
    pub model: String,
    /// Exit code 4 fires when errored/total exceeds this ratio.
    pub max_failure_ratio: f64,
    pub correct_threshold: f64,
    pub patterns: FailurePatterns,
    pub judge: BackendConfig,
    pub embedder: BackendConfig,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

/// All `TRAJEVAL_*` variables from the process environment.
pub fn collect_env() -> BTreeMap<String, String> {
    std::env::vars()
        .filter(|(key, _)| key.starts_with(ENV_PREFIX))
        .collect()
}

fn env_parse<T: FromStr>(env: &BTreeMap<String, String>, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    match env.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|e| CliError::Config(format!("{key}={raw}: {e}"))),
    }
}

fn env_backend(env: &BTreeMap<String, String>, prefix: &str) -> BackendConfig {
    let get = |suffix: &str| env.get(&format!("{ENV_PREFIX}{prefix}{suffix}")).cloned();
    BackendConfig {
        kind: get(""),
        url: get("_URL"),
        model: get("_MODEL"),
        auth_env: get("_AUTH_ENV"),
        script: get("_SCRIPT").map(PathBuf::from),
        prompts: get("_PROMPTS").map(PathBuf::from),
        timeout_secs: None,
        max_attempts: None,
    }
}

fn parse_mode(raw: &str) -> Result<EvidenceMode, CliError> {
    match raw {
        "with_bank" => Ok(EvidenceMode::WithBank),
        "full_dialog" => Ok(EvidenceMode::FullDialog),
        other => Err(CliError::Config(format!(
            "unknown mode '{other}' (expected with_bank or full_dialog)"
        ))),
    }
}

/// Folds the three layers over the defaults and validates the result.
pub fn resolve(
    file: &FileConfig,
    env: &BTreeMap<String, String>,
    flags: &FlagOverrides,
) -> Result<AppConfig, CliError> {
    // Scalars: file, then environment, then flags.
    let seed = flags
        .seed
        .or(env_parse(env, "TRAJEVAL_SEED")?)
        .or(file.seed)
        .unwrap_or(0);
    let workers = flags
        .workers
        .or(env_parse(env, "TRAJEVAL_WORKERS")?)
        .or(file.workers)
        .unwrap_or(4);
    if workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    let mode = flags
        .mode
        .clone()
        .or_else(|| env.get("TRAJEVAL_MODE").cloned())
        .or_else(|| file.mode.clone())
        .map(|raw| parse_mode(&raw))
        .transpose()?
        .unwrap_or(EvidenceMode::WithBank);
    let model = flags
        .model
        .clone()
        .or_else(|| env.get("TRAJEVAL_MODEL").cloned())
        .or_else(|| file.model.clone())
        .unwrap_or_else(|| "unnamed-model".into());
    let max_failure_ratio = flags
        .max_failure_ratio
        .or(env_parse(env, "TRAJEVAL_MAX_FAILURE_RATIO")?)
        .or(file.max_failure_ratio)
        .unwrap_or(0.0);
    if !(0.0..=1.0).contains(&max_failure_ratio) {
        return Err(CliError::Config(format!(
            "max_failure_ratio {max_failure_ratio} outside 0..=1"
        )));
    }
    let correct_threshold = env_parse(env, "TRAJEVAL_CORRECT_THRESHOLD")?
        .or(file.correct_threshold)
        .unwrap_or(trajeval_core::metrics::DEFAULT_CORRECT_THRESHOLD);
    if !(0.0..=1.0).contains(&correct_threshold) {
        return Err(CliError::Config(format!(
            "correct_threshold {correct_threshold} outside 0..=1"
        )));
    }

    // Failure patterns extend the defaults rather than replacing them, so
    // the built-in feedback strings always count as failures.
    let mut substrings: Vec<String> = trajeval_core::failure::DEFAULT_FAILURE_SUBSTRINGS
        .iter()
        .map(|s| s.to_string())
        .collect();
    substrings.extend(file.failure_substrings.clone().unwrap_or_default());
    substrings.extend(flags.failure_substrings.clone());
    let mut regexes = file.failure_regexes.clone().unwrap_or_default();
    regexes.extend(flags.failure_regexes.clone());
    let patterns = FailurePatterns::new(&substrings, &regexes)
        .map_err(|e| CliError::Config(e.to_string()))?;

    // Backends: later layers override field by field.
    let mut judge = file.judge.clone().unwrap_or_default();
    judge.merge_over(&env_backend(env, "JUDGE"));
    judge.merge_over(&flags.judge);
    let mut embedder = file.embedder.clone().unwrap_or_default();
    embedder.merge_over(&env_backend(env, "EMBEDDER"));
    embedder.merge_over(&flags.embedder);
    for backend in [&judge, &embedder] {
        if let Some(script) = &backend.script {
            if !script.exists() {
                return Err(CliError::Config(format!(
                    "referenced script {} does not exist",
                    script.display()
                )));
            }
        }
        if let Some(prompts) = &backend.prompts {
            if !prompts.exists() {
                return Err(CliError::Config(format!(
                    "referenced prompt directory {} does not exist",
                    prompts.display()
                )));
            }
        }
    }

    Ok(AppConfig {
        seed,
        workers,
        mode,
        model,
        max_failure_ratio,
        correct_threshold,
        patterns,
        judge,
        embedder,
    })
}

// ---------------------------------------------------------------------------
// Backend construction
// ---------------------------------------------------------------------------

/// Builds a chat-endpoint client from a backend section; `url` and `model`
/// are required, the token stays behind its environment variable name.
pub fn client_config(backend: &BackendConfig, what: &str) -> Result<ChatClientConfig, CliError> {
    let url = backend
        .url
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{what}: remote backend needs a url")))?;
    let model = backend
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{what}: remote backend needs a model")))?;
    let mut config = ChatClientConfig::new(url, model);
    config.auth_env = backend.auth_env.clone();
    if let Some(secs) = backend.timeout_secs {
        config.timeout = Duration::from_secs(secs);
    }
    if let Some(attempts) = backend.max_attempts {
        config.retry.max_attempts = attempts;
    }
    Ok(config)
}

/// Instantiates the judge named by `kind`. The oracle kinds key their
/// verdicts off the labels of the trajectories under evaluation.
pub fn build_judge(
    backend: &BackendConfig,
    labeled: &[Trajectory],
) -> Result<Box<dyn Judge>, CliError> {
    match backend.kind.as_deref().unwrap_or("label_oracle") {
        "label_oracle" => Ok(Box::new(ScriptedJudge::label_oracle(labeled))),
        "flipped_oracle" => Ok(Box::new(ScriptedJudge::flipped_oracle(labeled))),
        "script" => {
            let path = backend.script.as_ref().ok_or_else(|| {
                CliError::Config("judge kind 'script' needs a script file".into())
            })?;
            ScriptedJudge::from_script_file(path)
                .map(|j| Box::new(j) as Box<dyn Judge>)
                .map_err(|e| CliError::Config(e.to_string()))
        }
        "remote" => {
            let client = ChatClient::new(client_config(backend, "judge")?)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let prompts = match &backend.prompts {
                Some(dir) => {
                    PromptSet::from_dir(dir).map_err(|e| CliError::Config(e.to_string()))?
                }
                None => PromptSet::default(),
            };
            Ok(Box::new(RemoteJudge::new(client, prompts)))
        }
        other => Err(CliError::Config(format!(
            "unknown judge kind '{other}' (expected label_oracle, flipped_oracle, script, or remote)"
        ))),
    }
}

pub fn build_embedder(backend: &BackendConfig) -> Result<Box<dyn Embedder>, CliError> {
    match backend.kind.as_deref().unwrap_or("bag_of_tokens") {
        "bag_of_tokens" => Ok(Box::new(BagOfTokensEmbedder)),
        "remote" => {
            let client = ChatClient::new(client_config(backend, "embedder")?)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Box::new(RemoteEmbedder::new(client)))
        }
        other => Err(CliError::Config(format!(
            "unknown embedder kind '{other}' (expected bag_of_tokens or remote)"
        ))),
    }
}
