//! Verdict providers for the three per-trajectory judgments: thought
//! grounding, minimal-evidence selection, and adaptivity to tool failures.
//!
//! Two interchangeable backends implement [`Judge`]. [`RemoteJudge`] prompts
//! a chat-completions model and parses a strict verdict grammar (final line
//! `YES`/`NO` or a bracketed index list), allowing one corrective reprompt.
//! [`ScriptedJudge`] answers deterministically from declared rules — the
//! label-keyed oracle used by meta-evaluation acceptance, plus simple
//! behavioral rules for offline tests — and never touches the network.
//!
//! Minimal-evidence selection supports two presentation modes: the indexed
//! evidence bank, or the raw dialog text with no structural indexing (the
//! ablation baseline). Verdict shapes are identical in both modes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::client::{ChatClient, ChatMessage, ClientError};
use crate::evidence::{Evidence, EvidenceBank, DEFAULT_RENDER_OBS_LIMIT};
use crate::trajectory::{compact_json, Query, Step, StepLabels, Trajectory};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge backend unavailable: {cause}")]
    BackendUnavailable { cause: String },
    #[error("judge backend rejected authentication")]
    AuthRejected,
    #[error("judge backend rate limited")]
    RateLimited,
    #[error("verdict did not match the answer grammar: {raw:?}")]
    UnparseableVerdict { raw: String },
    #[error("verdict named indices {indices:?} outside the {bank_len}-entry bank")]
    InvalidIndices { indices: Vec<usize>, bank_len: usize },
    #[error("scripted judge has no entry for {context}")]
    ScriptGap { context: String },
    #[error("judge configuration invalid: {0}")]
    Config(String),
}

impl From<ClientError> for JudgeError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::AuthRejected => JudgeError::AuthRejected,
            ClientError::RateLimited => JudgeError::RateLimited,
            ClientError::Config(msg) => JudgeError::Config(msg),
            ClientError::BackendUnavailable { cause } => JudgeError::BackendUnavailable { cause },
            ClientError::InvalidResponse(msg) => JudgeError::BackendUnavailable { cause: msg },
        }
    }
}

// ---------------------------------------------------------------------------
// Verdicts and requests
// ---------------------------------------------------------------------------

/// How evidence is presented to the minimal-evidence judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceMode {
    /// The indexed, structured evidence bank rendering.
    WithBank,
    /// The raw concatenated dialog text; ablation baseline.
    FullDialog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingVerdict {
    /// 1-based step whose thought was judged.
    pub step: usize,
    pub grounded: bool,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalEvidenceVerdict {
    /// Indices of bank entries essential to the final answer.
    pub minimal_indices: BTreeSet<usize>,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptivityVerdict {
    /// Index of the evidence entry holding the failure observation.
    pub failure_step: usize,
    pub adaptive: bool,
}

/// Is the thought at `step` supported by the evidence gathered before it?
#[derive(Debug, Clone)]
pub struct GroundingRequest<'a> {
    pub trajectory_id: &'a str,
    pub step: usize,
    pub query: &'a Query,
    pub thought: &'a str,
    /// Evidence available before the step (snapshot at `step − 1`).
    pub evidence: &'a EvidenceBank,
}

/// Which evidence entries are essential to the final answer?
#[derive(Debug, Clone)]
pub struct MinimalEvidenceRequest<'a> {
    pub trajectory_id: &'a str,
    pub query: &'a Query,
    pub final_answer: &'a str,
    pub bank: &'a EvidenceBank,
    pub mode: EvidenceMode,
    /// Raw dialog text, consulted only in [`EvidenceMode::FullDialog`].
    pub dialog: &'a str,
}

/// Did the step after a failed call adapt to the failure?
#[derive(Debug, Clone)]
pub struct AdaptivityRequest<'a> {
    pub trajectory_id: &'a str,
    pub query: &'a Query,
    pub failure: &'a Evidence,
    pub next_step: &'a Step,
}

/// A verdict provider. Implementations must be deterministic for scripted
/// backends and safe for concurrent calls; none may mutate its inputs.
pub trait Judge: Send + Sync {
    fn is_grounded(&self, req: &GroundingRequest<'_>) -> Result<GroundingVerdict, JudgeError>;

    fn select_minimal_evidence(
        &self,
        req: &MinimalEvidenceRequest<'_>,
    ) -> Result<MinimalEvidenceVerdict, JudgeError>;

    fn judge_adaptivity(&self, req: &AdaptivityRequest<'_>)
        -> Result<AdaptivityVerdict, JudgeError>;
}

// ---------------------------------------------------------------------------
// Verdict grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum VerdictToken {
    YesNo(bool),
    Indices(Vec<usize>),
}

/// Parses the final non-empty line of a judge reply. Accepts exactly `YES`,
/// `NO`, or a bracketed index list like `[1, 3]` / `[]`; everything else is
/// a grammar failure.
fn parse_verdict_line(raw: &str) -> Option<VerdictToken> {
    let line = raw.lines().rev().find(|l| !l.trim().is_empty())?.trim();
    match line {
        "YES" => return Some(VerdictToken::YesNo(true)),
        "NO" => return Some(VerdictToken::YesNo(false)),
        _ => {}
    }
    let inner = line.strip_prefix('[')?.strip_suffix(']')?.trim();
    if inner.is_empty() {
        return Some(VerdictToken::Indices(Vec::new()));
    }
    let mut indices = Vec::new();
    for part in inner.split(',') {
        indices.push(part.trim().parse().ok()?);
    }
    Some(VerdictToken::Indices(indices))
}

/// Everything before the verdict line, kept as the judge's rationale.
fn rationale_of(raw: &str) -> Option<String> {
    let mut lines: Vec<&str> = raw.lines().collect();
    while let Some(last) = lines.last() {
        let trimmed = last.trim();
        lines.pop();
        if !trimmed.is_empty() {
            break;
        }
    }
    let text = lines.join("\n").trim().to_string();
    if text.is_empty() {
        None
    } else {
        Some(text)
    }
}

// ---------------------------------------------------------------------------
// Prompt templates
// ---------------------------------------------------------------------------

/// The four judge prompt templates with named placeholders ({query},
/// {evidence}, {thought}, {final_answer}, {failure}, {next_step}, {dialog}).
/// Built-ins are compiled in; a directory override swaps all four.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub grounding: String,
    pub min_evidence: String,
    pub min_evidence_full_dialog: String,
    pub adaptivity: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            grounding: include_str!("../prompts/grounding.txt").to_string(),
            min_evidence: include_str!("../prompts/min_evidence.txt").to_string(),
            min_evidence_full_dialog: include_str!("../prompts/min_evidence_full_dialog.txt")
                .to_string(),
            adaptivity: include_str!("../prompts/adaptivity.txt").to_string(),
        }
    }
}

impl PromptSet {
    /// Loads all four templates from a directory (`grounding.txt`,
    /// `min_evidence.txt`, `min_evidence_full_dialog.txt`, `adaptivity.txt`).
    pub fn from_dir(dir: &Path) -> Result<Self, JudgeError> {
        let load = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| {
                JudgeError::Config(format!("prompt template {}: {e}", dir.join(name).display()))
            })
        };
        Ok(PromptSet {
            grounding: load("grounding.txt")?,
            min_evidence: load("min_evidence.txt")?,
            min_evidence_full_dialog: load("min_evidence_full_dialog.txt")?,
            adaptivity: load("adaptivity.txt")?,
        })
    }
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in pairs {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

fn render_next_step(step: &Step) -> String {
    format!(
        "Thought: {}\nAction: {}\nAction Input: {}",
        step.thought,
        step.action,
        compact_json(&step.action_input),
    )
}

// ---------------------------------------------------------------------------
// Remote backend
// ---------------------------------------------------------------------------

const YESNO_REPROMPT: &str =
    "Your final line must be exactly YES or NO. Repeat your verdict in that format.";
const INDICES_REPROMPT: &str =
    "Your final line must be a bracketed list of indices such as [1, 3] or []. \
     Repeat your verdict in that format.";

/// Judge backed by a chat-completions endpoint. One corrective reprompt on a
/// grammar failure, then the raw reply surfaces as `UnparseableVerdict`.
pub struct RemoteJudge {
    client: ChatClient,
    prompts: PromptSet,
}

impl RemoteJudge {
    pub fn new(client: ChatClient, prompts: PromptSet) -> Self {
        RemoteJudge { client, prompts }
    }

    /// Sends `prompt`, reprompting once with `correction` if the reply does
    /// not parse. Returns the token plus the rationale of the parsed reply.
    fn ask(
        &self,
        prompt: String,
        correction: &str,
    ) -> Result<(VerdictToken, Option<String>), JudgeError> {
        let mut messages = vec![ChatMessage::user(prompt)];
        let first = self.client.chat_complete(&messages)?;
        if let Some(token) = parse_verdict_line(&first.text) {
            return Ok((token, rationale_of(&first.text)));
        }
        messages.push(ChatMessage::assistant(first.text.clone()));
        messages.push(ChatMessage::user(correction));
        let second = self.client.chat_complete(&messages)?;
        match parse_verdict_line(&second.text) {
            Some(token) => Ok((token, rationale_of(&second.text))),
            None => Err(JudgeError::UnparseableVerdict { raw: second.text }),
        }
    }
}

impl Judge for RemoteJudge {
    fn is_grounded(&self, req: &GroundingRequest<'_>) -> Result<GroundingVerdict, JudgeError> {
        let prompt = fill(
            &self.prompts.grounding,
            &[
                ("query", req.query.text.as_str()),
                ("evidence", &req.evidence.render_structured()),
                ("thought", req.thought),
            ],
        );
        let (token, rationale) = self.ask(prompt, YESNO_REPROMPT)?;
        match token {
            VerdictToken::YesNo(grounded) => Ok(GroundingVerdict {
                step: req.step,
                grounded,
                rationale,
            }),
            VerdictToken::Indices(_) => Err(JudgeError::UnparseableVerdict {
                raw: "index list where YES/NO was required".into(),
            }),
        }
    }

    fn select_minimal_evidence(
        &self,
        req: &MinimalEvidenceRequest<'_>,
    ) -> Result<MinimalEvidenceVerdict, JudgeError> {
        if req.bank.is_empty() {
            return Ok(MinimalEvidenceVerdict {
                minimal_indices: BTreeSet::new(),
                rationale: None,
            });
        }
        let prompt = match req.mode {
            EvidenceMode::WithBank => fill(
                &self.prompts.min_evidence,
                &[
                    ("query", req.query.text.as_str()),
                    ("final_answer", req.final_answer),
                    ("evidence", &req.bank.render_structured()),
                ],
            ),
            EvidenceMode::FullDialog => fill(
                &self.prompts.min_evidence_full_dialog,
                &[
                    ("dialog", req.dialog),
                    ("final_answer", req.final_answer),
                ],
            ),
        };
        let (token, rationale) = self.ask(prompt, INDICES_REPROMPT)?;
        let indices = match token {
            VerdictToken::Indices(list) => list,
            VerdictToken::YesNo(_) => {
                return Err(JudgeError::UnparseableVerdict {
                    raw: "YES/NO where an index list was required".into(),
                })
            }
        };
        let valid: BTreeSet<usize> = req.bank.indices().into_iter().collect();
        let bad: Vec<usize> = indices.iter().copied().filter(|i| !valid.contains(i)).collect();
        if !bad.is_empty() {
            return Err(JudgeError::InvalidIndices {
                indices: bad,
                bank_len: req.bank.len(),
            });
        }
        Ok(MinimalEvidenceVerdict {
            minimal_indices: indices.into_iter().collect(),
            rationale,
        })
    }

    fn judge_adaptivity(
        &self,
        req: &AdaptivityRequest<'_>,
    ) -> Result<AdaptivityVerdict, JudgeError> {
        let prompt = fill(
            &self.prompts.adaptivity,
            &[
                ("query", req.query.text.as_str()),
                ("failure", &req.failure.render_line(DEFAULT_RENDER_OBS_LIMIT)),
                ("next_step", &render_next_step(req.next_step)),
            ],
        );
        let (token, _) = self.ask(prompt, YESNO_REPROMPT)?;
        match token {
            VerdictToken::YesNo(adaptive) => Ok(AdaptivityVerdict {
                failure_step: req.failure.index,
                adaptive,
            }),
            VerdictToken::Indices(_) => Err(JudgeError::UnparseableVerdict {
                raw: "index list where YES/NO was required".into(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// How the scripted judge answers grounding requests.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundingRule {
    /// Grounded exactly when the step carries no hallucination label.
    LabelOracle,
    /// Negation of the oracle — maximally wrong, for calibration tests.
    FlippedOracle,
    /// Grounded when the thought restates an observation in the snapshot
    /// (or the snapshot is empty).
    Substring,
    Constant { grounded: bool },
}

/// How the scripted judge selects minimal evidence.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum MinEvidenceRule {
    /// Essential exactly the entries whose step carries no inefficiency
    /// label.
    LabelOracle,
    /// The complement: exactly the labeled-inefficient entries.
    FlippedOracle,
    /// Every entry is essential.
    AllEssential,
    Constant { indices: BTreeSet<usize> },
}

/// How the scripted judge answers adaptivity requests.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptivityRule {
    /// Adaptive exactly when the continuation step is labeled adaptive.
    LabelOracle,
    FlippedOracle,
    /// Non-adaptive exactly when the continuation repeats the failed call
    /// (same action, same input).
    NoRepeat,
    Constant { adaptive: bool },
}

/// Ground-truth labels indexed by (trajectory id, 1-based step).
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    by_id: BTreeMap<String, Vec<StepLabels>>,
}

impl LabelIndex {
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Self {
        let mut by_id = BTreeMap::new();
        for t in trajectories {
            let labels = t
                .steps
                .iter()
                .map(|s| s.labels.unwrap_or_default())
                .collect();
            by_id.insert(t.query.id.clone(), labels);
        }
        LabelIndex { by_id }
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    fn labels(&self, trajectory_id: &str, step: usize) -> Result<StepLabels, JudgeError> {
        let steps = self.by_id.get(trajectory_id).ok_or_else(|| JudgeError::ScriptGap {
            context: format!("trajectory '{trajectory_id}'"),
        })?;
        steps
            .get(step.checked_sub(1).ok_or_else(|| JudgeError::ScriptGap {
                context: format!("trajectory '{trajectory_id}' step 0"),
            })?)
            .copied()
            .ok_or_else(|| JudgeError::ScriptGap {
                context: format!("trajectory '{trajectory_id}' step {step}"),
            })
    }
}

/// Deterministic judge driven by declared rules; the offline test surface
/// for everything downstream. Identical inputs always produce identical
/// verdicts.
pub struct ScriptedJudge {
    grounding: GroundingRule,
    min_evidence: MinEvidenceRule,
    adaptivity: AdaptivityRule,
    labels: LabelIndex,
}

/// On-disk scripted-judge declaration:
///
/// ```json
/// {
///   "grounding": {"rule": "label_oracle"},
///   "min_evidence": {"rule": "label_oracle"},
///   "adaptivity": {"rule": "no_repeat"},
///   "labels_from": "labeled_dataset.ndjson"
/// }
/// ```
///
/// `labels_from` is resolved relative to the script file and is required
/// only when a rule consults labels.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    grounding: GroundingRule,
    min_evidence: MinEvidenceRule,
    adaptivity: AdaptivityRule,
    #[serde(default)]
    labels_from: Option<String>,
}

impl ScriptedJudge {
    pub fn new(
        grounding: GroundingRule,
        min_evidence: MinEvidenceRule,
        adaptivity: AdaptivityRule,
        labels: LabelIndex,
    ) -> Self {
        ScriptedJudge { grounding, min_evidence, adaptivity, labels }
    }

    /// The label-keyed oracle for a labeled dataset: every verdict agrees
    /// with the ground-truth annotations.
    pub fn label_oracle(trajectories: &[Trajectory]) -> Self {
        ScriptedJudge::new(
            GroundingRule::LabelOracle,
            MinEvidenceRule::LabelOracle,
            AdaptivityRule::LabelOracle,
            LabelIndex::from_trajectories(trajectories),
        )
    }

    /// The oracle's negation: every verdict disagrees with the labels.
    pub fn flipped_oracle(trajectories: &[Trajectory]) -> Self {
        ScriptedJudge::new(
            GroundingRule::FlippedOracle,
            MinEvidenceRule::FlippedOracle,
            AdaptivityRule::FlippedOracle,
            LabelIndex::from_trajectories(trajectories),
        )
    }

    pub fn from_script_file(path: &Path) -> Result<Self, JudgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Config(format!("script {}: {e}", path.display())))?;
        let script: ScriptFile = serde_json::from_str(&text)
            .map_err(|e| JudgeError::Config(format!("script {}: {e}", path.display())))?;
        let needs_labels = matches!(
            script.grounding,
            GroundingRule::LabelOracle | GroundingRule::FlippedOracle
        ) || matches!(
            script.min_evidence,
            MinEvidenceRule::LabelOracle | MinEvidenceRule::FlippedOracle
        ) || matches!(
            script.adaptivity,
            AdaptivityRule::LabelOracle | AdaptivityRule::FlippedOracle
        );
        let labels = match script.labels_from {
            Some(rel) => {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                let dataset = crate::trajectory::read_ndjson(&base.join(&rel))
                    .map_err(|e| JudgeError::Config(format!("labels_from {rel}: {e}")))?;
                LabelIndex::from_trajectories(&dataset)
            }
            None if needs_labels => {
                return Err(JudgeError::Config(
                    "a label-keyed rule requires labels_from".into(),
                ))
            }
            None => LabelIndex::default(),
        };
        Ok(ScriptedJudge::new(
            script.grounding,
            script.min_evidence,
            script.adaptivity,
            labels,
        ))
    }
}

impl Judge for ScriptedJudge {
    fn is_grounded(&self, req: &GroundingRequest<'_>) -> Result<GroundingVerdict, JudgeError> {
        let grounded = match &self.grounding {
            GroundingRule::LabelOracle => {
                !self
                    .labels
                    .labels(req.trajectory_id, req.step)?
                    .hallucination
                    .unwrap_or(false)
            }
            GroundingRule::FlippedOracle => self
                .labels
                .labels(req.trajectory_id, req.step)?
                .hallucination
                .unwrap_or(false),
            GroundingRule::Substring => {
                req.evidence.is_empty()
                    || req.evidence.entries().iter().any(|e| {
                        !e.observation.is_empty()
                            && (req.thought.contains(&e.observation)
                                || e.observation.contains(req.thought))
                    })
            }
            GroundingRule::Constant { grounded } => *grounded,
        };
        Ok(GroundingVerdict { step: req.step, grounded, rationale: None })
    }

    fn select_minimal_evidence(
        &self,
        req: &MinimalEvidenceRequest<'_>,
    ) -> Result<MinimalEvidenceVerdict, JudgeError> {
        if req.bank.is_empty() {
            return Ok(MinimalEvidenceVerdict {
                minimal_indices: BTreeSet::new(),
                rationale: None,
            });
        }
        let minimal_indices = match &self.min_evidence {
            MinEvidenceRule::LabelOracle => {
                let mut keep = BTreeSet::new();
                for index in req.bank.indices() {
                    if !self
                        .labels
                        .labels(req.trajectory_id, index)?
                        .inefficient
                        .unwrap_or(false)
                    {
                        keep.insert(index);
                    }
                }
                keep
            }
            MinEvidenceRule::FlippedOracle => {
                let mut keep = BTreeSet::new();
                for index in req.bank.indices() {
                    if self
                        .labels
                        .labels(req.trajectory_id, index)?
                        .inefficient
                        .unwrap_or(false)
                    {
                        keep.insert(index);
                    }
                }
                keep
            }
            MinEvidenceRule::AllEssential => req.bank.indices().into_iter().collect(),
            MinEvidenceRule::Constant { indices } => {
                let valid: BTreeSet<usize> = req.bank.indices().into_iter().collect();
                let bad: Vec<usize> =
                    indices.iter().copied().filter(|i| !valid.contains(i)).collect();
                if !bad.is_empty() {
                    return Err(JudgeError::InvalidIndices {
                        indices: bad,
                        bank_len: req.bank.len(),
                    });
                }
                indices.clone()
            }
        };
        Ok(MinimalEvidenceVerdict { minimal_indices, rationale: None })
    }

    fn judge_adaptivity(
        &self,
        req: &AdaptivityRequest<'_>,
    ) -> Result<AdaptivityVerdict, JudgeError> {
        let continuation_step = req.failure.index + 1;
        let adaptive = match &self.adaptivity {
            AdaptivityRule::LabelOracle => self
                .labels
                .labels(req.trajectory_id, continuation_step)?
                .adaptive
                .unwrap_or(false),
            AdaptivityRule::FlippedOracle => {
                !self
                    .labels
                    .labels(req.trajectory_id, continuation_step)?
                    .adaptive
                    .unwrap_or(false)
            }
            AdaptivityRule::NoRepeat => {
                req.next_step.action != req.failure.action
                    || req.next_step.action_input != req.failure.input
            }
            AdaptivityRule::Constant { adaptive } => *adaptive,
        };
        Ok(AdaptivityVerdict { failure_step: req.failure.index, adaptive })
    }
}
