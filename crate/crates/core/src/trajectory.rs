//! Trajectory data model, serialization, and structural validation.
//!
//! A trajectory is the ordered record of one solution attempt: for each step
//! a thought, an action (tool name), the action input, and the observation
//! the environment returned. The terminal step uses the literal action
//! [`FINAL_ANSWER_ACTION`] and carries the final answer in its input instead
//! of an observation, which keeps step indexing uniform for the per-step
//! metrics.
//!
//! The JSON wire format is fixed; datasets are newline-delimited JSON, one
//! trajectory per line. Parsing and serialization round-trip the data model
//! exactly (key order aside), and [`validate_structure`] reports every
//! invariant breach with the step index and rule name.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::failure::FailurePatterns;

/// Action marker of the terminal step.
pub const FINAL_ANSWER_ACTION: &str = "final_answer";

/// Action recorded when the agent's output could not be parsed into a step.
pub const UNPARSEABLE_ACTION: &str = "<unparseable>";

// ---------------------------------------------------------------------------
// Data model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    /// Multiple choice; scored by exact normalized match.
    #[serde(rename = "MCQ")]
    Mcq,
    /// Long-form textual response; scored by embedding cosine.
    #[serde(rename = "LTR")]
    Ltr,
    /// Image answer; scored by cosine over the producing tool call's
    /// arguments against the gold arguments.
    #[serde(rename = "IMG")]
    Img,
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerType::Mcq => f.write_str("MCQ"),
            AnswerType::Ltr => f.write_str("LTR"),
            AnswerType::Img => f.write_str("IMG"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Image,
    Text,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFile {
    pub path: String,
    pub kind: FileKind,
}

/// The user query a trajectory answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub files: Vec<QueryFile>,
    pub answer_type: AnswerType,
    /// Reference answer; for IMG queries, the gold tool arguments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl Query {
    /// Extracts enumerated MCQ choices of the form `(A) text` from the query
    /// text, in order of appearance.
    pub fn mcq_choices(&self) -> Vec<(char, String)> {
        let re = regex::Regex::new(r"\(([A-Z])\)\s*([^(\n]*)").expect("static regex");
        re.captures_iter(&self.text)
            .map(|c| {
                let letter = c[1].chars().next().expect("single capture letter");
                (letter, c[2].trim().to_string())
            })
            .collect()
    }

    /// True when `candidate`, after normalization, names one of the query's
    /// enumerated choices either by letter or by full choice text.
    pub fn matches_choice(&self, candidate: &str) -> bool {
        let norm = normalize_answer(candidate);
        if norm.is_empty() {
            return false;
        }
        self.mcq_choices().iter().any(|(letter, text)| {
            norm == letter.to_lowercase().to_string() || norm == normalize_answer(text)
        })
    }
}

/// Trim, casefold, and strip trailing punctuation. Shared by MCQ validation
/// and MCQ scoring.
pub fn normalize_answer(s: &str) -> String {
    s.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub param_type: String,
    #[serde(default)]
    pub required: bool,
}

/// A tool the agent may select. `available: false` marks an injected fake
/// tool: same description and parameters as its real counterpart, different
/// name, and the environment answers it with an unavailable-tool error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDef {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
    #[serde(default = "default_true")]
    pub available: bool,
}

fn default_true() -> bool {
    true
}

impl ToolDef {
    /// Checks `args` against the parameter schema. Returns the first problem
    /// found as a human-readable message.
    pub fn validate_args(&self, args: &Value) -> Result<(), String> {
        if self.parameters.is_empty() {
            return match args {
                Value::Null | Value::Object(_) => Ok(()),
                other => Err(format!("expected an object, got {}", json_type_name(other))),
            };
        }
        let obj = match args {
            Value::Object(map) => map,
            other => return Err(format!("expected an object, got {}", json_type_name(other))),
        };
        for (name, spec) in &self.parameters {
            match obj.get(name) {
                None if spec.required => return Err(format!("missing required parameter '{name}'")),
                None => {}
                Some(v) => {
                    if !type_matches(&spec.param_type, v) {
                        return Err(format!(
                            "parameter '{name}' must be a {}, got {}",
                            spec.param_type,
                            json_type_name(v)
                        ));
                    }
                }
            }
        }
        for key in obj.keys() {
            if !self.parameters.contains_key(key) {
                return Err(format!("unknown parameter '{key}'"));
            }
        }
        Ok(())
    }
}

fn json_type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn type_matches(tag: &str, v: &Value) -> bool {
    match tag {
        "string" => v.is_string(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64(),
        "boolean" => v.is_boolean(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        // Unknown tags accept anything rather than rejecting data we
        // cannot interpret.
        _ => true,
    }
}

/// Ground-truth annotations attached to a step by the augmentation pipeline.
/// Absent labels mean "normal step": the evaluator is still accountable for
/// not flagging it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inefficient: Option<bool>,
    /// Only meaningful on a step whose predecessor's observation is a
    /// failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptive: Option<bool>,
}

impl StepLabels {
    pub fn is_empty(&self) -> bool {
        self.hallucination.is_none() && self.inefficient.is_none() && self.adaptive.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub thought: String,
    pub action: String,
    pub action_input: Value,
    /// Absent on the terminal step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<StepLabels>,
}

impl Step {
    pub fn is_terminal(&self) -> bool {
        self.action == FINAL_ANSWER_ACTION
    }

    pub fn hallucination_label(&self) -> bool {
        self.labels.and_then(|l| l.hallucination).unwrap_or(false)
    }

    pub fn inefficient_label(&self) -> bool {
        self.labels.and_then(|l| l.inefficient).unwrap_or(false)
    }

    pub fn adaptive_label(&self) -> bool {
        self.labels.and_then(|l| l.adaptive).unwrap_or(false)
    }

    pub fn has_adaptive_label(&self) -> bool {
        self.labels.map_or(false, |l| l.adaptive.is_some())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    TurnLimit,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    /// Number of reasoning steps involving a tool call (the terminal answer
    /// step is not a turn).
    pub turns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
    pub terminated_by: Termination,
}

/// One complete solution attempt: query, toolset, ordered steps, and the
/// final answer. Immutable after construction and safe to share across
/// evaluation workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub query: Query,
    pub toolset: Vec<ToolDef>,
    pub steps: Vec<Step>,
    pub final_answer: String,
    pub meta: RunMeta,
}

impl Trajectory {
    /// Step count `n`, terminal step included.
    pub fn n(&self) -> usize {
        self.steps.len()
    }

    pub fn id(&self) -> &str {
        &self.query.id
    }

    pub fn terminal_step(&self) -> Option<&Step> {
        self.steps.last().filter(|s| s.is_terminal())
    }

    /// Steps that invoked a tool, i.e. everything before the terminal step.
    pub fn tool_steps(&self) -> &[Step] {
        if self.terminal_step().is_some() {
            &self.steps[..self.steps.len() - 1]
        } else {
            &self.steps
        }
    }

    pub fn tool_def(&self, name: &str) -> Option<&ToolDef> {
        self.toolset.iter().find(|t| t.name == name)
    }

    /// The raw concatenated dialog text, used by the no-evidence-bank judge
    /// ablation: every step rendered verbatim with no structural indexing.
    pub fn render_dialog(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Query: {}\n", self.query.text));
        for step in &self.steps {
            out.push_str(&format!("Thought: {}\n", step.thought));
            if step.is_terminal() {
                out.push_str(&format!("Final Answer: {}\n", self.final_answer));
            } else {
                out.push_str(&format!("Action: {}\n", step.action));
                out.push_str(&format!(
                    "Action Input: {}\n",
                    compact_json(&step.action_input)
                ));
                out.push_str(&format!(
                    "Observation: {}\n",
                    step.observation.as_deref().unwrap_or("")
                ));
            }
        }
        out
    }
}

/// Compact JSON with sorted object keys (the default `serde_json` map is
/// ordered), used wherever inputs are rendered or fingerprinted.
pub fn compact_json(v: &Value) -> String {
    serde_json::to_string(v).expect("JSON value serializes")
}

// ---------------------------------------------------------------------------
// Parsing and serialization
// ---------------------------------------------------------------------------

/// Supported wire formats for a single trajectory record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Json,
}

#[derive(Debug, Error)]
pub enum ParseError {
    /// Input is not syntactically valid for the format.
    #[error("malformed input: {0}")]
    MalformedInput(String),
    /// A required field is missing or has the wrong shape; names the field
    /// path.
    #[error("schema violation at {0}")]
    SchemaViolation(String),
    /// The record parsed but breaks a data-model invariant.
    #[error("invariant violation: {0}")]
    InvariantViolation(Violation),
}

/// One structural rule breach, naming the offending step (when positional)
/// and the rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 1-based step index, when the rule is positional.
    pub step: Option<usize>,
    pub rule: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(t) => write!(f, "step {}: {} ({})", t, self.rule, self.detail),
            None => write!(f, "{} ({})", self.rule, self.detail),
        }
    }
}

pub mod rules {
    pub const NONEMPTY_STEPS: &str = "nonempty-steps";
    pub const QUERY_ID: &str = "query-id";
    pub const MCQ_GOLD_IN_CHOICES: &str = "mcq-gold-in-choices";
    pub const UNIQUE_TOOL_NAMES: &str = "unique-tool-names";
    pub const MISSING_OBSERVATION: &str = "missing-observation";
    pub const TERMINAL_MARKER: &str = "terminal-marker";
    pub const TERMINAL_NO_OBSERVATION: &str = "terminal-no-observation";
    pub const FINAL_ANSWER_CONSISTENT: &str = "final-answer-consistent";
    pub const ADAPTIVE_AFTER_FAILURE: &str = "adaptive-after-failure";
    pub const TURNS_COUNT: &str = "turns-count";
}

/// Parses one trajectory record and enforces every data-model invariant.
///
/// A missing per-step observation surfaces as a `SchemaViolation` naming
/// `steps[i].observation`; all other invariant breaches surface as
/// `InvariantViolation` with the rule name.
pub fn parse_trajectory(raw: &[u8], format: TrajectoryFormat) -> Result<Trajectory, ParseError> {
    match format {
        TrajectoryFormat::Json => {}
    }
    let mut de = serde_json::Deserializer::from_slice(raw);
    let t: Trajectory = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let inner = e.inner();
        if inner.is_syntax() || inner.is_eof() {
            ParseError::MalformedInput(inner.to_string())
        } else {
            ParseError::SchemaViolation(format!("{}: {}", e.path(), inner))
        }
    })?;
    let violations = validate_structure(&t);
    if let Some(v) = violations.into_iter().next() {
        if v.rule == rules::MISSING_OBSERVATION {
            let idx = v.step.unwrap_or(1) - 1;
            return Err(ParseError::SchemaViolation(format!(
                "steps[{idx}].observation"
            )));
        }
        return Err(ParseError::InvariantViolation(v));
    }
    Ok(t)
}

/// Serializes a valid trajectory; the output re-parses to an equal value.
pub fn serialize_trajectory(t: &Trajectory) -> Vec<u8> {
    serde_json::to_vec(t).expect("trajectory serializes")
}

/// Checks every structural invariant, returning all breaches in step order.
/// An empty result means construction from these fields is legal.
pub fn validate_structure(t: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();
    let patterns = FailurePatterns::default();

    if t.query.id.is_empty() {
        out.push(Violation {
            step: None,
            rule: rules::QUERY_ID,
            detail: "query id must be non-empty".into(),
        });
    }
    if t.query.answer_type == AnswerType::Mcq {
        if let Some(gold) = &t.query.gold {
            if !t.query.matches_choice(gold) {
                out.push(Violation {
                    step: None,
                    rule: rules::MCQ_GOLD_IN_CHOICES,
                    detail: format!("gold '{gold}' is not one of the enumerated choices"),
                });
            }
        }
    }
    let mut seen = HashSet::new();
    for tool in &t.toolset {
        if !seen.insert(tool.name.as_str()) {
            out.push(Violation {
                step: None,
                rule: rules::UNIQUE_TOOL_NAMES,
                detail: format!("duplicate tool name '{}'", tool.name),
            });
        }
    }

    if t.steps.is_empty() {
        out.push(Violation {
            step: None,
            rule: rules::NONEMPTY_STEPS,
            detail: "a trajectory must contain at least the terminal step".into(),
        });
        return out;
    }

    let n = t.steps.len();
    for (i, step) in t.steps.iter().enumerate() {
        let idx = i + 1;
        let is_last = idx == n;
        if !is_last && step.observation.is_none() {
            out.push(Violation {
                step: Some(idx),
                rule: rules::MISSING_OBSERVATION,
                detail: "non-final step lacks an observation".into(),
            });
        }
        if is_last {
            if !step.is_terminal() {
                out.push(Violation {
                    step: Some(idx),
                    rule: rules::TERMINAL_MARKER,
                    detail: format!(
                        "final step action must be '{FINAL_ANSWER_ACTION}', got '{}'",
                        step.action
                    ),
                });
            } else {
                if step.observation.is_some() {
                    out.push(Violation {
                        step: Some(idx),
                        rule: rules::TERMINAL_NO_OBSERVATION,
                        detail: "terminal step carries the final answer, not an observation".into(),
                    });
                }
                match &step.action_input {
                    Value::String(s) if *s == t.final_answer => {}
                    other => out.push(Violation {
                        step: Some(idx),
                        rule: rules::FINAL_ANSWER_CONSISTENT,
                        detail: format!(
                            "terminal action_input {} does not equal final_answer",
                            compact_json(other)
                        ),
                    }),
                }
            }
        }
        if step.has_adaptive_label() {
            let predecessor_failed = i > 0
                && t.steps[i - 1]
                    .observation
                    .as_deref()
                    .map_or(false, |o| patterns.is_failure(o));
            if !predecessor_failed {
                out.push(Violation {
                    step: Some(idx),
                    rule: rules::ADAPTIVE_AFTER_FAILURE,
                    detail: "adaptive label requires the predecessor's observation to be a failure"
                        .into(),
                });
            }
        }
    }

    let tool_turns = if t.steps.last().map_or(false, Step::is_terminal) {
        (n - 1) as u64
    } else {
        n as u64
    };
    if t.meta.turns != tool_turns {
        out.push(Violation {
            step: None,
            rule: rules::TURNS_COUNT,
            detail: format!(
                "meta.turns is {}, trajectory has {} tool steps",
                t.meta.turns, tool_turns
            ),
        });
    }

    out
}

// ---------------------------------------------------------------------------
// NDJSON datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Record {
        path: String,
        line: usize,
        source: ParseError,
    },
}

/// Reads a newline-delimited JSON dataset, one trajectory per line. Blank
/// lines are skipped; every record must satisfy the full invariant set.
pub fn read_ndjson(path: &Path) -> Result<Vec<Trajectory>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let t = parse_trajectory(line.as_bytes(), TrajectoryFormat::Json).map_err(|source| {
            DatasetError::Record {
                path: path.display().to_string(),
                line: i + 1,
                source,
            }
        })?;
        out.push(t);
    }
    Ok(out)
}

/// Writes trajectories as newline-delimited JSON.
pub fn write_ndjson(path: &Path, trajectories: &[Trajectory]) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    for t in trajectories {
        buf.extend_from_slice(&serialize_trajectory(t));
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn minimal_json() -> String {
        json!({
            "query": {"id": "q1", "text": "What is 2+3?", "files": [], "answer_type": "LTR", "gold": "5"},
            "toolset": [],
            "steps": [{"thought": "Direct.", "action": "final_answer", "action_input": "5"}],
            "final_answer": "5",
            "meta": {"turns": 0, "terminated_by": "answer"}
        })
        .to_string()
    }

    #[test]
    fn parses_minimal_single_step() {
        let t = parse_trajectory(minimal_json().as_bytes(), TrajectoryFormat::Json).unwrap();
        assert_eq!(t.n(), 1);
        assert_eq!(t.final_answer, "5");
        assert!(t.terminal_step().is_some());
        assert_eq!(t.tool_steps().len(), 0);
    }

    #[test]
    fn missing_observation_names_field_path() {
        let raw = json!({
            "query": {"id": "q1", "text": "t", "files": [], "answer_type": "LTR"},
            "toolset": [],
            "steps": [
                {"thought": "call", "action": "OCR", "action_input": {"image": "a.jpg"}},
                {"thought": "done", "action": "final_answer", "action_input": "x"}
            ],
            "final_answer": "x",
            "meta": {"turns": 1, "terminated_by": "answer"}
        })
        .to_string();
        match parse_trajectory(raw.as_bytes(), TrajectoryFormat::Json) {
            Err(ParseError::SchemaViolation(path)) => {
                assert_eq!(path, "steps[0].observation");
            }
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_field_reports_path() {
        let raw = json!({
            "query": {"id": "q1", "text": "t", "files": [], "answer_type": "LTR"},
            "toolset": [],
            "steps": [{"action": "final_answer", "action_input": "x"}],
            "final_answer": "x",
            "meta": {"turns": 0, "terminated_by": "answer"}
        })
        .to_string();
        match parse_trajectory(raw.as_bytes(), TrajectoryFormat::Json) {
            Err(ParseError::SchemaViolation(path)) => {
                assert!(path.contains("steps[0]"), "path was {path}");
                assert!(path.contains("thought"), "path was {path}");
            }
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn syntax_error_is_malformed_input() {
        assert!(matches!(
            parse_trajectory(b"{not json", TrajectoryFormat::Json),
            Err(ParseError::MalformedInput(_))
        ));
    }

    #[test]
    fn roundtrip_identity_minimal() {
        let t = parse_trajectory(minimal_json().as_bytes(), TrajectoryFormat::Json).unwrap();
        let bytes = serialize_trajectory(&t);
        let back = parse_trajectory(&bytes, TrajectoryFormat::Json).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn serialize_preserves_labels() {
        let mut t = trajectory(
            "q-labels",
            vec![tool_step("OCR", json!({"image": "a.jpg"}), "hello")],
            "hello",
        );
        t.steps[0].labels = Some(StepLabels {
            hallucination: Some(true),
            inefficient: Some(false),
            adaptive: None,
        });
        let back =
            parse_trajectory(&serialize_trajectory(&t), TrajectoryFormat::Json).unwrap();
        assert_eq!(back.steps[0].labels, t.steps[0].labels);
    }

    #[test]
    fn valid_trajectory_has_no_violations() {
        let t = trajectory(
            "q-ok",
            vec![tool_step("OCR", json!({"image": "a.jpg"}), "text: hi")],
            "hi",
        );
        assert_eq!(validate_structure(&t), Vec::new());
    }

    #[test]
    fn empty_steps_violation() {
        let mut t = trajectory("q-empty", vec![], "x");
        t.steps.clear();
        t.meta.turns = 0;
        let v = validate_structure(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, rules::NONEMPTY_STEPS);
        assert_eq!(v[0].step, None);
    }

    #[test]
    fn adaptive_label_without_preceding_failure_is_flagged() {
        let mut t = trajectory(
            "q-adp",
            vec![
                tool_step("OCR", json!({"image": "a.jpg"}), "text: hi"),
                tool_step("Calculator", json!({"expr": "1+1"}), "2"),
            ],
            "2",
        );
        // Step 2's predecessor observation is ordinary output, not a failure.
        t.steps[1].labels = Some(StepLabels {
            hallucination: None,
            inefficient: None,
            adaptive: Some(true),
        });
        let v = validate_structure(&t);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].step, Some(2));
        assert_eq!(v[0].rule, rules::ADAPTIVE_AFTER_FAILURE);
    }

    #[test]
    fn adaptive_label_after_failure_is_legal() {
        let mut t = trajectory(
            "q-adp-ok",
            vec![
                tool_step(
                    "FastOCR",
                    json!({"image": "a.jpg"}),
                    "Error: unavailable tool 'FastOCR'",
                ),
                tool_step("OCR", json!({"image": "a.jpg"}), "text: hi"),
            ],
            "hi",
        );
        t.steps[1].labels = Some(StepLabels {
            hallucination: None,
            inefficient: None,
            adaptive: Some(true),
        });
        assert_eq!(validate_structure(&t), Vec::new());
    }

    #[test]
    fn terminal_marker_and_consistency_checked() {
        let mut t = trajectory("q-term", vec![], "yes");
        t.steps[0].action = "OCR".into();
        t.steps[0].observation = Some("out".into());
        t.meta.turns = 1;
        let v = validate_structure(&t);
        assert!(v.iter().any(|v| v.rule == rules::TERMINAL_MARKER));

        let mut t2 = trajectory("q-term2", vec![], "yes");
        t2.steps[0].action_input = json!("different");
        let v2 = validate_structure(&t2);
        assert!(v2.iter().any(|v| v.rule == rules::FINAL_ANSWER_CONSISTENT));
    }

    #[test]
    fn turns_mismatch_is_flagged() {
        let mut t = trajectory(
            "q-turns",
            vec![tool_step("OCR", json!({"image": "a.jpg"}), "hi")],
            "hi",
        );
        t.meta.turns = 7;
        let v = validate_structure(&t);
        assert!(v.iter().any(|v| v.rule == rules::TURNS_COUNT));
    }

    #[test]
    fn mcq_gold_must_name_a_choice() {
        let mut t = trajectory("q-mcq", vec![], "B");
        t.query.text = "Pick one: (A) red (B) blue (C) green".into();
        t.query.answer_type = AnswerType::Mcq;
        t.query.gold = Some("B".into());
        t.steps[0].action_input = json!("B");
        t.final_answer = "B".into();
        assert_eq!(validate_structure(&t), Vec::new());

        t.query.gold = Some("purple".into());
        let v = validate_structure(&t);
        assert!(v.iter().any(|v| v.rule == rules::MCQ_GOLD_IN_CHOICES));
    }

    #[test]
    fn mcq_choice_matching_accepts_letter_or_text() {
        let q = Query {
            id: "q".into(),
            text: "Which color? (A) crimson red (B) deep blue".into(),
            files: vec![],
            answer_type: AnswerType::Mcq,
            gold: Some("B".into()),
        };
        assert!(q.matches_choice("b"));
        assert!(q.matches_choice("Deep Blue."));
        assert!(q.matches_choice(" crimson red "));
        assert!(!q.matches_choice("magenta"));
    }

    #[test]
    fn duplicate_tool_names_flagged() {
        let mut t = trajectory("q-tools", vec![], "x");
        t.toolset.push(t.toolset[0].clone());
        let v = validate_structure(&t);
        assert!(v.iter().any(|v| v.rule == rules::UNIQUE_TOOL_NAMES));
    }

    #[test]
    fn validate_args_catches_schema_breaches() {
        let calc = tool("Calculator", "math", "expr");
        assert!(calc.validate_args(&json!({"expr": "2+3"})).is_ok());
        assert!(calc
            .validate_args(&json!({}))
            .unwrap_err()
            .contains("missing required parameter 'expr'"));
        assert!(calc
            .validate_args(&json!({"expr": 5}))
            .unwrap_err()
            .contains("must be a string"));
        assert!(calc
            .validate_args(&json!({"expr": "1", "extra": true}))
            .unwrap_err()
            .contains("unknown parameter"));
        assert!(calc.validate_args(&json!("2+3")).unwrap_err().contains("object"));
    }

    #[test]
    fn render_dialog_contains_every_section() {
        let t = trajectory(
            "q-dialog",
            vec![tool_step("OCR", json!({"image": "a.jpg"}), "text: hi")],
            "hi",
        );
        let d = t.render_dialog();
        assert!(d.contains("Query: "));
        assert!(d.contains("Action: OCR"));
        assert!(d.contains("Observation: text: hi"));
        assert!(d.contains("Final Answer: hi"));
    }

    // ----- property tests -------------------------------------------------

    fn arb_observation() -> impl Strategy<Value = String> {
        prop_oneof![
            "[a-zA-Z0-9 .,:]{0,40}",
            Just("Error: unavailable tool 'FastOCR'".to_string()),
        ]
    }

    type LabelSeed = (Option<bool>, Option<bool>, bool);

    prop_compose! {
        fn arb_trajectory()(
            body in proptest::collection::vec(
                (arb_observation(), any::<LabelSeed>()),
                0..5,
            ),
            answer in "[a-zA-Z0-9 ]{1,20}",
        ) -> Trajectory {
            let patterns = FailurePatterns::default();
            let mut bodies = Vec::new();
            for (i, (obs, (h, ineff, adp))) in body.iter().enumerate() {
                let mut step = tool_step(
                    "OCR",
                    json!({"image": format!("img{i}.jpg")}),
                    obs,
                );
                // The adaptive label is only legal right after a failure.
                let after_failure = i > 0 && patterns.is_failure(&body[i - 1].0);
                let labels = StepLabels {
                    hallucination: *h,
                    inefficient: *ineff,
                    adaptive: if after_failure && *adp { Some(true) } else { None },
                };
                step.labels = if labels.is_empty() { None } else { Some(labels) };
                bodies.push(step);
            }
            trajectory("q-prop", bodies, &answer)
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_is_identity(t in arb_trajectory()) {
            prop_assert_eq!(validate_structure(&t), Vec::new());
            let bytes = serialize_trajectory(&t);
            let back = parse_trajectory(&bytes, TrajectoryFormat::Json).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn non_final_steps_are_complete(t in arb_trajectory()) {
            for step in t.tool_steps() {
                prop_assert!(step.observation.is_some());
            }
        }
    }
}
