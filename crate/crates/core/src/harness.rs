//! ReAct episode execution: an agent policy against a tool registry.
//!
//! The loop renders the dialog so far into a prompt, asks the agent for one
//! turn, parses it (with an optional one-shot format correction), executes
//! the chosen tool, and feeds the observation back — until the agent
//! answers or the turn budget runs out. Tool problems never halt an
//! episode: unknown names, unavailable fakes, bad arguments, and executor
//! failures all become feedback observations the agent can react to, while
//! still counting as instruction errors downstream.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::client::{ChatClient, ChatMessage};
use crate::failure::unavailable_tool_observation;
use crate::trajectory::{
    compact_json, ParamSpec, Query, RunMeta, Step, Termination, ToolDef, Trajectory,
    FINAL_ANSWER_ACTION, UNPARSEABLE_ACTION,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("run configuration invalid: {0}")]
    Config(String),
    #[error("tool registry invalid: {0}")]
    Registry(String),
    #[error("registry file {path}: {detail}")]
    Spec { path: String, detail: String },
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("scripted agent ran out of turns")]
    Exhausted,
    #[error("agent backend unavailable: {0}")]
    Backend(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Observation templates for the feedback mechanism. Placeholders `{name}`
/// and `{detail}` are substituted at execution time; the defaults carry the
/// substrings the default failure patterns recognize.
#[derive(Debug, Clone)]
pub struct FeedbackMessages {
    pub unknown_tool: String,
    pub execution_error: String,
}

impl Default for FeedbackMessages {
    fn default() -> Self {
        FeedbackMessages {
            unknown_tool: "Error: tool not in the list: '{name}'".into(),
            execution_error: "Error: tool execution error: {detail}".into(),
        }
    }
}

impl FeedbackMessages {
    pub fn unknown_tool_observation(&self, name: &str) -> String {
        self.unknown_tool.replace("{name}", name)
    }

    pub fn execution_error_observation(&self, detail: &str) -> String {
        self.execution_error.replace("{detail}", detail)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Sampling temperature a remote agent should run at.
    pub temperature: f64,
    /// Completion budget per agent turn.
    pub max_tokens: u64,
    /// Tool-call turns before the episode is cut off.
    pub max_turns: u64,
    pub feedback: FeedbackMessages,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            temperature: 0.0,
            max_tokens: 4096,
            max_turns: 10,
            feedback: FeedbackMessages::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.max_turns == 0 {
            return Err(HarnessError::Config("max_turns must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tools
// ---------------------------------------------------------------------------

/// Runs one tool call. An `Err` carries a human-readable detail that
/// becomes a tool-execution-error observation; it never aborts the
/// episode.
pub trait ToolExecutor: Send + Sync {
    fn execute(&self, args: &Value) -> Result<String, String>;
}

/// The toolset an episode runs against: definitions plus executors for the
/// available ones. Fakes have no executor — calling them yields the
/// unavailable-tool observation.
#[derive(Default)]
pub struct ToolRegistry {
    defs: Vec<ToolDef>,
    executors: BTreeMap<String, Box<dyn ToolExecutor>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        ToolRegistry::default()
    }

    pub fn register(
        &mut self,
        def: ToolDef,
        executor: Box<dyn ToolExecutor>,
    ) -> Result<(), HarnessError> {
        let mut def = def;
        def.available = true;
        self.check_name(&def.name)?;
        self.executors.insert(def.name.clone(), executor);
        self.defs.push(def);
        Ok(())
    }

    /// Registers an unavailable fake tool; its definition is advertised but
    /// every call fails.
    pub fn register_fake(&mut self, def: ToolDef) -> Result<(), HarnessError> {
        let mut def = def;
        def.available = false;
        self.check_name(&def.name)?;
        self.defs.push(def);
        Ok(())
    }

    fn check_name(&self, name: &str) -> Result<(), HarnessError> {
        if self.defs.iter().any(|d| d.name == name) {
            return Err(HarnessError::Registry(format!("duplicate tool name '{name}'")));
        }
        Ok(())
    }

    pub fn toolset(&self) -> &[ToolDef] {
        &self.defs
    }

    /// Executes a call, always producing an observation: unknown names,
    /// unavailable fakes, schema breaches, and executor failures come back
    /// as feedback text instead of halting the run.
    pub fn execute(&self, name: &str, args: &Value, feedback: &FeedbackMessages) -> String {
        let Some(def) = self.defs.iter().find(|d| d.name == name) else {
            log::debug!("instruction error: tool '{name}' not in the list");
            return feedback.unknown_tool_observation(name);
        };
        if !def.available {
            log::debug!("fake tool '{name}' called");
            return unavailable_tool_observation(name);
        }
        if let Err(detail) = def.validate_args(args) {
            log::debug!("instruction error: bad arguments for '{name}': {detail}");
            return feedback.execution_error_observation(&detail);
        }
        match self.executors.get(name) {
            Some(executor) => match executor.execute(args) {
                Ok(observation) => observation,
                Err(detail) => {
                    log::debug!("executor failure for '{name}': {detail}");
                    feedback.execution_error_observation(&detail)
                }
            },
            None => feedback.execution_error_observation("no executor registered"),
        }
    }
}

// ---------------------------------------------------------------------------
// Mock executors
// ---------------------------------------------------------------------------

/// Arithmetic evaluator over `+ - * /`, parentheses, and decimal numbers.
pub struct Calculator {
    param: String,
}

impl Calculator {
    pub fn new(param: impl Into<String>) -> Self {
        Calculator { param: param.into() }
    }
}

impl Default for Calculator {
    fn default() -> Self {
        Calculator::new("expr")
    }
}

impl ToolExecutor for Calculator {
    fn execute(&self, args: &Value) -> Result<String, String> {
        let expr = args
            .get(&self.param)
            .and_then(Value::as_str)
            .ok_or_else(|| format!("missing string argument '{}'", self.param))?;
        eval_expression(expr).map(format_number)
    }
}

fn format_number(v: f64) -> String {
    if v.is_finite() && v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn eval_expression(text: &str) -> Result<f64, String> {
    let mut parser = ExprParser { bytes: text.as_bytes(), pos: 0 };
    let value = parser.expression()?;
    parser.skip_spaces();
    if parser.pos != parser.bytes.len() {
        return Err(format!("unexpected character at position {}", parser.pos + 1));
    }
    Ok(value)
}

struct ExprParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ExprParser<'_> {
    fn skip_spaces(&mut self) {
        while self.bytes.get(self.pos) == Some(&b' ') {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_spaces();
        self.bytes.get(self.pos).copied()
    }

    fn expression(&mut self) -> Result<f64, String> {
        let mut value = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            value = if op == b'+' { value + rhs } else { value - rhs };
        }
        Ok(value)
    }

    fn term(&mut self) -> Result<f64, String> {
        let mut value = self.factor()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.factor()?;
            if op == b'*' {
                value *= rhs;
            } else if rhs == 0.0 {
                return Err("division by zero".into());
            } else {
                value /= rhs;
            }
        }
        Ok(value)
    }

    fn factor(&mut self) -> Result<f64, String> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let value = self.expression()?;
                if self.peek() != Some(b')') {
                    return Err("missing closing parenthesis".into());
                }
                self.pos += 1;
                Ok(value)
            }
            Some(b'-') => {
                self.pos += 1;
                Ok(-self.factor()?)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|b| b.is_ascii_digit() || *b == b'.')
                {
                    self.pos += 1;
                }
                let literal = std::str::from_utf8(&self.bytes[start..self.pos])
                    .expect("digits are valid UTF-8");
                literal
                    .parse()
                    .map_err(|_| format!("malformed number '{literal}'"))
            }
            Some(c) => Err(format!("unexpected character '{}'", c as char)),
            None => Err("expression ended unexpectedly".into()),
        }
    }
}

/// Keyed canned responder: answers by looking one string argument up in a
/// fixed table, falling back to a default for unknown inputs.
pub struct CannedTool {
    param: String,
    responses: BTreeMap<String, String>,
    fallback: String,
}

impl CannedTool {
    pub fn new(
        param: impl Into<String>,
        responses: BTreeMap<String, String>,
        fallback: impl Into<String>,
    ) -> Self {
        CannedTool { param: param.into(), responses: responses.into_iter().collect(), fallback: fallback.into() }
    }
}

impl ToolExecutor for CannedTool {
    fn execute(&self, args: &Value) -> Result<String, String> {
        let key = args
            .get(&self.param)
            .and_then(Value::as_str)
            .ok_or_else(|| format!("missing string argument '{}'", self.param))?;
        Ok(self.responses.get(key).cloned().unwrap_or_else(|| self.fallback.clone()))
    }
}

// ---------------------------------------------------------------------------
// Registry files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Canned,
    Calculator,
}

/// One tool in a registry file: its advertised definition plus how to mock
/// its execution.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
    #[serde(default = "default_true")]
    pub available: bool,
    #[serde(default)]
    pub kind: ExecutorKind,
    /// Argument the executor consults; defaults to the first declared
    /// parameter.
    #[serde(default)]
    pub param: Option<String>,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub fallback: Option<String>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySpec {
    pub tools: Vec<ToolSpec>,
}

impl RegistrySpec {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Spec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Spec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

impl ToolRegistry {
    pub fn from_spec(spec: &RegistrySpec) -> Result<Self, HarnessError> {
        let mut registry = ToolRegistry::new();
        for tool in &spec.tools {
            let def = ToolDef {
                name: tool.name.clone(),
                description: tool.description.clone(),
                parameters: tool.parameters.clone(),
                available: tool.available,
            };
            if !tool.available {
                registry.register_fake(def)?;
                continue;
            }
            let param = tool
                .param
                .clone()
                .or_else(|| tool.parameters.keys().next().cloned())
                .ok_or_else(|| {
                    HarnessError::Registry(format!("tool '{}' declares no parameters", tool.name))
                })?;
            let executor: Box<dyn ToolExecutor> = match tool.kind {
                ExecutorKind::Calculator => Box::new(Calculator::new(param)),
                ExecutorKind::Canned => Box::new(CannedTool::new(
                    param,
                    tool.responses.clone(),
                    tool.fallback.clone().unwrap_or_else(|| "no result".into()),
                )),
            };
            registry.register(def, executor)?;
        }
        Ok(registry)
    }
}

// ---------------------------------------------------------------------------
// Agent policies
// ---------------------------------------------------------------------------

/// One raw agent turn plus the backend's token accounting, when it has
/// any.
#[derive(Debug, Clone)]
pub struct AgentTurn {
    pub text: String,
    pub completion_tokens: Option<u64>,
}

impl AgentTurn {
    pub fn text(text: impl Into<String>) -> Self {
        AgentTurn { text: text.into(), completion_tokens: None }
    }
}

/// A source of agent turns. Policies are mutable because replayed scripts
/// advance through their turn list.
pub trait AgentPolicy: Send {
    fn next_turn(&mut self, prompt: &str) -> Result<AgentTurn, AgentError>;
}

/// Replays a fixed list of raw outputs; the deterministic stand-in for an
/// external model.
pub struct ScriptedAgent {
    turns: VecDeque<String>,
}

impl ScriptedAgent {
    pub fn new(turns: Vec<String>) -> Self {
        ScriptedAgent { turns: turns.into() }
    }

    /// Loads a JSON array of raw turn strings.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Spec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let turns: Vec<String> = serde_json::from_str(&text).map_err(|e| HarnessError::Spec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(ScriptedAgent::new(turns))
    }
}

impl AgentPolicy for ScriptedAgent {
    fn next_turn(&mut self, _prompt: &str) -> Result<AgentTurn, AgentError> {
        self.turns.pop_front().map(AgentTurn::text).ok_or(AgentError::Exhausted)
    }
}

/// Chat-backed agent: sends the rendered episode prompt with a fixed
/// system preamble.
pub struct RemoteAgent {
    client: ChatClient,
    system: String,
}

impl RemoteAgent {
    pub fn new(client: ChatClient, system: impl Into<String>) -> Self {
        RemoteAgent { client, system: system.into() }
    }
}

impl AgentPolicy for RemoteAgent {
    fn next_turn(&mut self, prompt: &str) -> Result<AgentTurn, AgentError> {
        let messages = [ChatMessage::system(&self.system), ChatMessage::user(prompt)];
        let reply = self
            .client
            .chat_complete(&messages)
            .map_err(|e| AgentError::Backend(e.to_string()))?;
        Ok(AgentTurn { text: reply.text, completion_tokens: reply.completion_tokens })
    }
}

// ---------------------------------------------------------------------------
// Turn parsing and format correction
// ---------------------------------------------------------------------------

/// An agent turn in structured form; terminal turns carry the answer as a
/// string input under the final-answer action.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTurn {
    pub thought: String,
    pub action: String,
    pub action_input: Value,
}

impl ParsedTurn {
    pub fn is_terminal(&self) -> bool {
        self.action == FINAL_ANSWER_ACTION
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Thought,
    Action,
    Input,
    Final,
}

/// Strict-but-tolerant grammar for a ReAct block: headers are matched
/// case-insensitively at line starts, values run until the next header,
/// and for repeated headers the last occurrence wins. Returns `None` when
/// no actionable turn (tool call or final answer) is present.
pub fn parse_react_block(raw: &str) -> Option<ParsedTurn> {
    let headers: [(&str, Section); 4] = [
        ("thought:", Section::Thought),
        ("action input:", Section::Input),
        ("action:", Section::Action),
        ("final answer:", Section::Final),
    ];
    let mut sections: Vec<(Section, String)> = Vec::new();
    for line in raw.lines() {
        let header = headers.iter().find_map(|(name, section)| {
            let head = line.get(..name.len())?;
            head.eq_ignore_ascii_case(name)
                .then(|| (*section, line[name.len()..].trim_start()))
        });
        match header {
            Some((section, rest)) => sections.push((section, rest.to_string())),
            None => {
                if let Some((_, value)) = sections.last_mut() {
                    value.push('\n');
                    value.push_str(line);
                }
            }
        }
    }
    let last_of = |wanted: Section| {
        sections
            .iter()
            .rev()
            .find(|(section, _)| *section == wanted)
            .map(|(_, value)| value.trim().to_string())
    };
    let thought = last_of(Section::Thought).unwrap_or_default();
    if let Some(answer) = last_of(Section::Final) {
        return Some(ParsedTurn {
            thought,
            action: FINAL_ANSWER_ACTION.into(),
            action_input: Value::String(answer),
        });
    }
    let action = last_of(Section::Action)?;
    if action.is_empty() {
        return None;
    }
    let action_input = match last_of(Section::Input) {
        Some(text) => json_or_string(&text),
        None => Value::Object(serde_json::Map::new()),
    };
    Some(ParsedTurn { thought, action, action_input })
}

fn json_or_string(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Parses a raw turn, spending at most one corrector round-trip on
/// malformed output. Whatever still fails to parse is recorded as an
/// unparseable action — data, not an error.
pub fn format_correct(
    raw: &str,
    corrector: Option<&mut (dyn AgentPolicy + '_)>,
    correction_template: &str,
) -> ParsedTurn {
    if let Some(turn) = parse_react_block(raw) {
        return turn;
    }
    if let Some(corrector) = corrector {
        let prompt = correction_template.replace("{raw}", raw);
        match corrector.next_turn(&prompt) {
            Ok(reply) => {
                if let Some(turn) = parse_react_block(&reply.text) {
                    return turn;
                }
            }
            Err(e) => log::debug!("format corrector unavailable: {e}"),
        }
    }
    ParsedTurn {
        thought: String::new(),
        action: UNPARSEABLE_ACTION.into(),
        action_input: Value::String(raw.trim().to_string()),
    }
}

// ---------------------------------------------------------------------------
// Episode loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpisodePrompts {
    /// Template with `{query}`, `{tools}`, and `{history}` placeholders.
    pub agent: String,
    /// Template with a `{raw}` placeholder for the malformed turn.
    pub correction: String,
}

impl Default for EpisodePrompts {
    fn default() -> Self {
        EpisodePrompts {
            agent: include_str!("../prompts/agent.txt").into(),
            correction: include_str!("../prompts/format_correction.txt").into(),
        }
    }
}

impl EpisodePrompts {
    pub fn from_dir(dir: &Path) -> Result<Self, HarnessError> {
        let load = |name: &str| {
            std::fs::read_to_string(dir.join(name)).map_err(|e| HarnessError::Spec {
                path: dir.join(name).display().to_string(),
                detail: e.to_string(),
            })
        };
        Ok(EpisodePrompts {
            agent: load("agent.txt")?,
            correction: load("format_correction.txt")?,
        })
    }
}

fn render_tool_list(tools: &[ToolDef]) -> String {
    tools
        .iter()
        .map(|tool| {
            let args: Vec<String> = tool
                .parameters
                .iter()
                .map(|(name, spec)| {
                    let requirement = if spec.required { "required " } else { "" };
                    format!("{name}: {requirement}{}", spec.param_type)
                })
                .collect();
            format!("- {}: {} ({})", tool.name, tool.description, args.join(", "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn render_history(steps: &[Step]) -> String {
    let mut out = String::new();
    for step in steps {
        out.push_str(&format!(
            "Thought: {}\nAction: {}\nAction Input: {}\nObservation: {}\n",
            step.thought,
            step.action,
            compact_json(&step.action_input),
            step.observation.as_deref().unwrap_or(""),
        ));
    }
    out
}

/// Runs one episode to completion. Never fails: agent backend errors end
/// the run as an abort, the turn budget as a turn limit, and both close
/// the trajectory with an empty synthetic answer so every output is
/// structurally valid.
pub fn run_episode(
    agent: &mut dyn AgentPolicy,
    mut corrector: Option<&mut (dyn AgentPolicy + '_)>,
    query: &Query,
    registry: &ToolRegistry,
    cfg: &RunConfig,
    prompts: &EpisodePrompts,
) -> Trajectory {
    let max_turns = cfg.max_turns.max(1);
    let mut steps: Vec<Step> = Vec::new();
    let mut output_tokens: Option<u64> = None;
    let mut termination = Termination::TurnLimit;
    let mut final_answer = String::new();

    for _ in 0..max_turns {
        let prompt = prompts
            .agent
            .replace("{query}", &query.text)
            .replace("{tools}", &render_tool_list(registry.toolset()))
            .replace("{history}", &render_history(&steps));
        let turn = match agent.next_turn(&prompt) {
            Ok(turn) => turn,
            Err(e) => {
                log::debug!("agent for '{}' aborted: {e}", query.id);
                termination = Termination::Abort;
                break;
            }
        };
        if let Some(tokens) = turn.completion_tokens {
            output_tokens = Some(output_tokens.unwrap_or(0) + tokens);
        }
        let parsed = format_correct(&turn.text, corrector.as_deref_mut(), &prompts.correction);
        if parsed.is_terminal() {
            let answer = match &parsed.action_input {
                Value::String(s) => s.clone(),
                other => compact_json(other),
            };
            final_answer = answer.clone();
            steps.push(Step {
                thought: parsed.thought,
                action: FINAL_ANSWER_ACTION.into(),
                action_input: Value::String(answer),
                observation: None,
                labels: None,
            });
            termination = Termination::Answer;
            break;
        }
        let observation = registry.execute(&parsed.action, &parsed.action_input, &cfg.feedback);
        steps.push(Step {
            thought: parsed.thought,
            action: parsed.action,
            action_input: parsed.action_input,
            observation: Some(observation),
            labels: None,
        });
    }

    if termination != Termination::Answer {
        steps.push(Step {
            thought: String::new(),
            action: FINAL_ANSWER_ACTION.into(),
            action_input: Value::String(String::new()),
            observation: None,
            labels: None,
        });
    }
    let turns = (steps.len() - 1) as u64;
    Trajectory {
        query: query.clone(),
        toolset: registry.toolset().to_vec(),
        steps,
        final_answer,
        meta: RunMeta { turns, output_tokens, terminated_by: termination },
    }
}
