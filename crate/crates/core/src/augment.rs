//! Labeled-dataset construction from clean ground-truth trajectories.
//!
//! A clean trajectory answers its query with every step necessary and every
//! thought grounded. This module turns such trajectories into labeled
//! meta-evaluation data in three moves: enumerate alternative tool orders
//! that respect inter-step dependencies, inject labeled flaws (inefficient
//! duplicates, fabricated thoughts, unavailable-tool probes with adaptive
//! or non-adaptive continuations), and filter the results through a
//! validator consensus. All randomness flows from one seed, so a dataset
//! can be regenerated bit-identically.

use std::collections::BTreeSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::client::{ChatClient, ChatMessage};
use crate::failure::{unavailable_tool_observation, FailurePatterns};
use crate::judge::{EvidenceMode, Judge, JudgeError};
use crate::meta_eval::{collect_verdicts, DatasetManifest, Dialect};
use crate::trajectory::{validate_structure, Step, StepLabels, ToolDef, Trajectory};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("injection position {position} outside 1..={max}")]
    InvalidPosition { position: usize, max: usize },
    #[error("injection at step {position} breaks a dependency: {detail}")]
    DependencyBreak { position: usize, detail: String },
    #[error("order limit must be at least 1")]
    LimitZero,
    #[error("fake tool '{fake}' collides with an existing tool name")]
    NameCollision { fake: String },
    #[error("real tool '{real}' not present in the toolset")]
    UnknownRealTool { real: String },
    #[error("step generation failed: {0}")]
    Generator(String),
    #[error("validator {index}: {source}")]
    Validator { index: usize, source: JudgeError },
    #[error("consensus requires at least one validator")]
    NoValidators,
    #[error("augmentation options invalid: {0}")]
    Config(String),
}

// ---------------------------------------------------------------------------
// Dependency inference
// ---------------------------------------------------------------------------

/// Which tool steps feed which: an edge `(j, k)` with `j < k` means step
/// `k`'s input refers to step `j`'s observation, so `j` must run first.
/// Edges only ever point forward, which keeps the graph acyclic by
/// construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    nodes: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DependencyGraph {
    /// Number of tool steps covered (1-based indices `1..=nodes`).
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Producers that must precede step `k`.
    pub fn requires(&self, k: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|(_, to)| *to == k)
            .map(|(from, _)| *from)
            .collect()
    }
}

/// Pattern for an explicit output reference inside an action input:
/// `{{obs:3}}` names the observation of tool step 3.
const OBS_TOKEN_PATTERN: &str = r"\{\{obs:(\d+)\}\}";

/// Infers the dependency graph of a trajectory's tool steps. Step `k`
/// depends on step `j` when `k`'s input carries an explicit `{{obs:j}}`
/// token, embeds `j`'s observation verbatim, or shares a distinctive token
/// with it (a number of two or more digits, or any token of four or more
/// characters) that the query itself did not supply.
pub fn infer_dependencies(t: &Trajectory) -> DependencyGraph {
    let steps = t.tool_steps();
    let m = steps.len();
    let mut query_tokens = tokens_of(&t.query.text);
    for file in &t.query.files {
        query_tokens.extend(tokens_of(&file.path));
    }

    let mut edges = BTreeSet::new();
    for k in 2..=m {
        let leaves = leaf_strings(&steps[k - 1].action_input);
        let input_tokens: BTreeSet<String> =
            leaves.iter().flat_map(|l| tokens_of(l)).collect();
        for j in 1..k {
            let observation = steps[j - 1].observation.as_deref().unwrap_or("");
            if references(&leaves, &input_tokens, observation, j, &query_tokens) {
                edges.insert((j, k));
            }
        }
    }
    DependencyGraph { nodes: m, edges }
}

fn references(
    leaves: &[&str],
    input_tokens: &BTreeSet<String>,
    observation: &str,
    producer: usize,
    query_tokens: &BTreeSet<String>,
) -> bool {
    let token = format!("{{{{obs:{producer}}}}}");
    if leaves.iter().any(|l| l.contains(&token)) {
        return true;
    }
    let verbatim = observation.trim();
    if !verbatim.is_empty() && leaves.iter().any(|l| l.contains(verbatim)) {
        return true;
    }
    tokens_of(observation).iter().any(|tok| {
        distinctive(tok) && !query_tokens.contains(tok) && input_tokens.contains(tok)
    })
}

/// A token specific enough to witness data flow: short numbers and any
/// longer word. One-character fragments and tiny words match everywhere
/// and prove nothing.
fn distinctive(token: &str) -> bool {
    let all_digits = token.chars().all(|c| c.is_ascii_digit());
    (all_digits && token.len() >= 2) || token.len() >= 4
}

fn tokens_of(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn leaf_strings(value: &Value) -> Vec<&str> {
    let mut out = Vec::new();
    collect_leaves(value, &mut out);
    out
}

fn collect_leaves<'a>(value: &'a Value, out: &mut Vec<&'a str>) {
    match value {
        Value::String(s) => out.push(s),
        Value::Array(items) => items.iter().for_each(|v| collect_leaves(v, out)),
        Value::Object(map) => map.values().for_each(|v| collect_leaves(v, out)),
        _ => {}
    }
}

/// Rewrites every `{{obs:j}}` token in the value's string leaves through
/// `map`.
fn rewrite_obs_tokens(value: &mut Value, map: &dyn Fn(usize) -> usize) {
    match value {
        Value::String(s) => {
            let re = Regex::new(OBS_TOKEN_PATTERN).expect("static regex");
            if re.is_match(s) {
                *s = re
                    .replace_all(s, |caps: &regex::Captures<'_>| {
                        let j: usize = caps[1].parse().expect("digits parse");
                        format!("{{{{obs:{}}}}}", map(j))
                    })
                    .into_owned();
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| rewrite_obs_tokens(v, map)),
        Value::Object(obj) => obj.values_mut().for_each(|v| rewrite_obs_tokens(v, map)),
        _ => {}
    }
}

/// Shifts explicit output references at or past `from` up by `by`, after
/// steps were inserted there. The terminal step is left alone: its input
/// must stay byte-equal to the final answer.
fn shift_obs_tokens(steps: &mut [Step], from: usize, by: usize) {
    for step in steps {
        if step.is_terminal() {
            continue;
        }
        rewrite_obs_tokens(&mut step.action_input, &|j| if j >= from { j + by } else { j });
    }
}

// ---------------------------------------------------------------------------
// Order enumeration
// ---------------------------------------------------------------------------

/// All topological linearizations of `g`, capped at `limit`. The original
/// ascending order comes first; orders are emitted in lexicographic order
/// of original step indices.
pub fn topological_orders(
    g: &DependencyGraph,
    limit: usize,
) -> Result<Vec<Vec<usize>>, AugmentError> {
    if limit == 0 {
        return Err(AugmentError::LimitZero);
    }
    let m = g.nodes;
    let mut predecessors = vec![Vec::new(); m + 1];
    for &(from, to) in &g.edges {
        predecessors[to].push(from);
    }
    let mut orders = Vec::new();
    let mut placed = vec![false; m + 1];
    let mut current = Vec::with_capacity(m);
    extend_order(m, &predecessors, limit, &mut placed, &mut current, &mut orders);
    Ok(orders)
}

fn extend_order(
    m: usize,
    predecessors: &[Vec<usize>],
    limit: usize,
    placed: &mut Vec<bool>,
    current: &mut Vec<usize>,
    orders: &mut Vec<Vec<usize>>,
) {
    if orders.len() == limit {
        return;
    }
    if current.len() == m {
        orders.push(current.clone());
        return;
    }
    for i in 1..=m {
        if placed[i] || !predecessors[i].iter().all(|&p| placed[p]) {
            continue;
        }
        placed[i] = true;
        current.push(i);
        extend_order(m, predecessors, limit, placed, current, orders);
        current.pop();
        placed[i] = false;
        if orders.len() == limit {
            return;
        }
    }
}

/// Materializes up to `limit` reorderings of a clean trajectory, the
/// original order first. Steps move as whole units (thought, call,
/// observation, labels); explicit `{{obs:j}}` references are renumbered to
/// follow the steps they name.
pub fn enumerate_valid_orders(
    t: &Trajectory,
    g: &DependencyGraph,
    limit: usize,
) -> Result<Vec<Trajectory>, AugmentError> {
    let orders = topological_orders(g, limit)?;
    Ok(orders.iter().map(|perm| reorder(t, perm)).collect())
}

fn reorder(t: &Trajectory, perm: &[usize]) -> Trajectory {
    let mut position_of = vec![0usize; perm.len() + 1];
    for (slot, &original) in perm.iter().enumerate() {
        position_of[original] = slot + 1;
    }
    let tool_steps = t.tool_steps();
    let mut steps: Vec<Step> = perm
        .iter()
        .map(|&original| tool_steps[original - 1].clone())
        .collect();
    for step in &mut steps {
        rewrite_obs_tokens(&mut step.action_input, &|j| {
            position_of.get(j).copied().filter(|&p| p != 0).unwrap_or(j)
        });
    }
    if let Some(terminal) = t.terminal_step() {
        steps.push(terminal.clone());
    }
    let mut out = t.clone();
    out.steps = steps;
    out
}

// ---------------------------------------------------------------------------
// Injection
// ---------------------------------------------------------------------------

/// What to put into the trajectory at the planned position.
#[derive(Debug, Clone)]
pub enum InjectionPayload {
    /// A verbatim duplicate of the (earlier) `source` step, labeled
    /// inefficient: it adds no new evidence.
    Inefficient { source: usize, thought: String },
    /// Replaces the thought at the position with content not supported by
    /// prior evidence, labeled hallucinated. The step's call and
    /// observation are untouched.
    Hallucination { thought: String },
    /// Inserts a probe: a call to `fake` with the target step's input,
    /// observed failing as unavailable. With `adaptive` the target step
    /// becomes the recovery (its thought acknowledges the failure and it
    /// keeps its real call); without, a verbatim retry of the probe is
    /// inserted first — also failing — before the recovery.
    Adaptivity {
        fake: String,
        probe_thought: String,
        retry_thought: String,
        recovery_thought: String,
        adaptive: bool,
    },
}

#[derive(Debug, Clone)]
pub struct InjectionPlan {
    /// 1-based step index the payload lands at.
    pub position: usize,
    pub payload: InjectionPayload,
}

/// Applies one injection, returning the grown trajectory. Pre-existing
/// steps keep their calls and observations bit-exact; only the targeted
/// thought (hallucination, recovery) changes. Labels already present are
/// preserved.
pub fn inject_step(t: &Trajectory, plan: &InjectionPlan) -> Result<Trajectory, AugmentError> {
    let mut out = t.clone();
    match &plan.payload {
        InjectionPayload::Inefficient { source, thought } => {
            inject_inefficient(&mut out, plan.position, *source, thought)?
        }
        InjectionPayload::Hallucination { thought } => {
            inject_hallucination(&mut out, plan.position, thought)?
        }
        InjectionPayload::Adaptivity {
            fake,
            probe_thought,
            retry_thought,
            recovery_thought,
            adaptive,
        } => inject_adaptivity(
            &mut out,
            plan.position,
            fake,
            probe_thought,
            retry_thought,
            recovery_thought,
            *adaptive,
        )?,
    }
    out.meta.turns = out.tool_steps().len() as u64;
    Ok(out)
}

fn update_labels(step: &mut Step, apply: impl FnOnce(&mut StepLabels)) {
    let mut labels = step.labels.unwrap_or_default();
    apply(&mut labels);
    step.labels = if labels.is_empty() { None } else { Some(labels) };
}

fn inject_inefficient(
    t: &mut Trajectory,
    position: usize,
    source: usize,
    thought: &str,
) -> Result<(), AugmentError> {
    let m = t.tool_steps().len();
    if position == 0 || position > m + 1 {
        return Err(AugmentError::InvalidPosition { position, max: m + 1 });
    }
    if source == 0 || source > m {
        return Err(AugmentError::InvalidPosition { position: source, max: m });
    }
    if source >= position {
        return Err(AugmentError::DependencyBreak {
            position,
            detail: format!("duplicate would run before its source step {source}"),
        });
    }
    if t.steps[position - 1].has_adaptive_label() {
        return Err(AugmentError::DependencyBreak {
            position,
            detail: "would separate a failure from its labeled continuation".into(),
        });
    }
    let original = &t.steps[source - 1];
    let duplicate = Step {
        thought: thought.to_string(),
        action: original.action.clone(),
        action_input: original.action_input.clone(),
        observation: original.observation.clone(),
        labels: Some(StepLabels { inefficient: Some(true), ..Default::default() }),
    };
    shift_obs_tokens(&mut t.steps, position, 1);
    t.steps.insert(position - 1, duplicate);
    Ok(())
}

fn inject_hallucination(
    t: &mut Trajectory,
    position: usize,
    thought: &str,
) -> Result<(), AugmentError> {
    let n = t.n();
    if position == 0 || position > n {
        return Err(AugmentError::InvalidPosition { position, max: n });
    }
    let step = &mut t.steps[position - 1];
    step.thought = thought.to_string();
    update_labels(step, |l| l.hallucination = Some(true));
    Ok(())
}

fn inject_adaptivity(
    t: &mut Trajectory,
    position: usize,
    fake: &str,
    probe_thought: &str,
    retry_thought: &str,
    recovery_thought: &str,
    adaptive: bool,
) -> Result<(), AugmentError> {
    let m = t.tool_steps().len();
    if position == 0 || position > m {
        return Err(AugmentError::InvalidPosition { position, max: m });
    }
    let target = t.steps[position - 1].clone();
    let real_def = t
        .tool_def(&target.action)
        .ok_or_else(|| AugmentError::UnknownRealTool { real: target.action.clone() })?
        .clone();
    match t.tool_def(fake) {
        Some(existing) if existing.available => {
            return Err(AugmentError::NameCollision { fake: fake.to_string() })
        }
        Some(_) => {}
        None => t.toolset.push(ToolDef {
            name: fake.to_string(),
            description: real_def.description.clone(),
            parameters: real_def.parameters.clone(),
            available: false,
        }),
    }

    let probe = Step {
        thought: probe_thought.to_string(),
        action: fake.to_string(),
        action_input: target.action_input.clone(),
        observation: Some(unavailable_tool_observation(fake)),
        labels: None,
    };
    let inserted = if adaptive {
        vec![probe]
    } else {
        let mut retry = probe.clone();
        retry.thought = retry_thought.to_string();
        retry.labels = Some(StepLabels { adaptive: Some(false), ..Default::default() });
        vec![probe, retry]
    };

    let grow = inserted.len();
    shift_obs_tokens(&mut t.steps, position, grow);
    for (offset, step) in inserted.into_iter().enumerate() {
        t.steps.insert(position - 1 + offset, step);
    }
    let recovery = &mut t.steps[position - 1 + grow];
    recovery.thought = recovery_thought.to_string();
    update_labels(recovery, |l| l.adaptive = Some(true));
    Ok(())
}

// ---------------------------------------------------------------------------
// Fake tools
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeToolPair {
    pub real: String,
    pub fake: String,
}

/// Real-to-fake tool name pairs. Fakes carry the real tool's description
/// and schema verbatim and differ only by name, so an agent can tell them
/// apart only by trying them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeToolMap {
    pub pairs: Vec<FakeToolPair>,
}

impl Default for FakeToolMap {
    fn default() -> Self {
        let pair = |real: &str, fake: &str| FakeToolPair {
            real: real.to_string(),
            fake: fake.to_string(),
        };
        FakeToolMap {
            pairs: vec![
                pair("Calculator", "FastCalculator"),
                pair("OCR", "FastOCR"),
                pair("ImageDescription", "ImageDescriptor"),
                pair("GoogleSearch", "WebSearch"),
            ],
        }
    }
}

impl FakeToolMap {
    pub fn fake_for(&self, real: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|p| p.real == real)
            .map(|p| p.fake.as_str())
    }

    /// The subset of pairs whose real tool exists in `toolset`.
    pub fn restricted_to(&self, toolset: &[ToolDef]) -> FakeToolMap {
        FakeToolMap {
            pairs: self
                .pairs
                .iter()
                .filter(|p| toolset.iter().any(|t| t.name == p.real && t.available))
                .cloned()
                .collect(),
        }
    }
}

/// Extends a toolset with unavailable fakes, one per map pair, copying each
/// real counterpart's description and schema byte for byte.
pub fn make_fake_toolset(
    toolset: &[ToolDef],
    map: &FakeToolMap,
) -> Result<Vec<ToolDef>, AugmentError> {
    let mut out = toolset.to_vec();
    for pair in &map.pairs {
        let real = out
            .iter()
            .find(|t| t.name == pair.real && t.available)
            .cloned()
            .ok_or_else(|| AugmentError::UnknownRealTool { real: pair.real.clone() })?;
        if out.iter().any(|t| t.name == pair.fake) {
            return Err(AugmentError::NameCollision { fake: pair.fake.clone() });
        }
        out.push(ToolDef {
            name: pair.fake.clone(),
            description: real.description,
            parameters: real.parameters,
            available: false,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Validator consensus
// ---------------------------------------------------------------------------

/// True iff every validator's verdicts agree with the trajectory's own
/// labels: grounding against hallucination flags, the minimal evidence set
/// against inefficiency flags, and adaptivity against continuation flags.
/// Judge failures carry the offending validator's index.
pub fn validate_consensus(
    t: &Trajectory,
    validators: &[&dyn Judge],
    patterns: &FailurePatterns,
) -> Result<bool, AugmentError> {
    if validators.is_empty() {
        return Err(AugmentError::NoValidators);
    }
    for (index, validator) in validators.iter().enumerate() {
        let agrees = validator_agrees(t, *validator, patterns)
            .map_err(|source| AugmentError::Validator { index, source })?;
        if !agrees {
            return Ok(false);
        }
    }
    Ok(true)
}

fn validator_agrees(
    t: &Trajectory,
    validator: &dyn Judge,
    patterns: &FailurePatterns,
) -> Result<bool, JudgeError> {
    let set = collect_verdicts(t, validator, EvidenceMode::WithBank, patterns, true, true)?;
    for verdict in &set.grounding {
        if !verdict.grounded != t.steps[verdict.step - 1].hallucination_label() {
            return Ok(false);
        }
    }
    let essential: BTreeSet<usize> = t
        .tool_steps()
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.inefficient_label())
        .map(|(i, _)| i + 1)
        .collect();
    if set.min_evidence.minimal_indices != essential {
        return Ok(false);
    }
    for verdict in &set.adaptivity {
        if verdict.adaptive != t.steps[verdict.failure_step].adaptive_label() {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Step-content generation
// ---------------------------------------------------------------------------

/// Produces the textual content of injected steps. Implementations draw
/// all randomness from the passed generator so dataset builds replay
/// exactly.
pub trait StepGenerator: Send + Sync {
    /// Thought for a redundant re-run of `duplicated`.
    fn inefficient_thought(
        &self,
        rng: &mut dyn RngCore,
        duplicated: &Step,
    ) -> Result<String, AugmentError>;

    /// A thought asserting something none of the trajectory's observations
    /// (nor its query) supports.
    fn hallucinated_thought(
        &self,
        rng: &mut dyn RngCore,
        t: &Trajectory,
    ) -> Result<String, AugmentError>;

    /// Thought for first trying the fake tool.
    fn probe_thought(&self, rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError>;

    /// Thought for repeating the failed call verbatim.
    fn retry_thought(&self, rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError>;

    /// Thought for acknowledging the failure and switching to the real
    /// tool.
    fn recovery_thought(
        &self,
        rng: &mut dyn RngCore,
        fake: &str,
        real: &str,
    ) -> Result<String, AugmentError>;
}

/// Deterministic phrasebook generator: picks among fixed templates and
/// fabricates hallucinated figures guaranteed absent from the evidence.
pub struct TemplateGenerator;

fn pick<'a>(rng: &mut dyn RngCore, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

impl StepGenerator for TemplateGenerator {
    fn inefficient_thought(
        &self,
        rng: &mut dyn RngCore,
        duplicated: &Step,
    ) -> Result<String, AugmentError> {
        let template = pick(rng, &[
            "To be sure, I will run {action} once more with the same input.",
            "Let me double-check that result by calling {action} again.",
            "I should verify the previous output with another {action} call.",
        ]);
        Ok(template.replace("{action}", &duplicated.action))
    }

    fn hallucinated_thought(
        &self,
        rng: &mut dyn RngCore,
        t: &Trajectory,
    ) -> Result<String, AugmentError> {
        let mut haystack = t.query.text.clone();
        for step in &t.steps {
            if let Some(obs) = &step.observation {
                haystack.push('\n');
                haystack.push_str(obs);
            }
        }
        haystack.push('\n');
        haystack.push_str(&t.final_answer);

        let figure = (0..32)
            .map(|_| rng.gen_range(100u32..10_000))
            .find(|v| !haystack.contains(&v.to_string()))
            .ok_or_else(|| {
                AugmentError::Generator("no fabricated figure avoids the evidence".into())
            })?;
        let template = pick(rng, &[
            "The results so far clearly show the value is {figure}, which settles it.",
            "Based on what I have gathered, the total comes to {figure}.",
            "The evidence indicates {figure} as the key figure here.",
        ]);
        Ok(template.replace("{figure}", &figure.to_string()))
    }

    fn probe_thought(&self, rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError> {
        let template = pick(rng, &[
            "{fake} should handle this faster; let me try it.",
            "I will use {fake} to speed this step up.",
        ]);
        Ok(template.replace("{fake}", fake))
    }

    fn retry_thought(&self, rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError> {
        let template = pick(rng, &[
            "That call may have glitched; I will run {fake} again the same way.",
            "Let me retry {fake} exactly as before.",
        ]);
        Ok(template.replace("{fake}", fake))
    }

    fn recovery_thought(
        &self,
        rng: &mut dyn RngCore,
        fake: &str,
        real: &str,
    ) -> Result<String, AugmentError> {
        let template = pick(rng, &[
            "{fake} is unavailable, so I will fall back to {real}.",
            "Since {fake} cannot be used, I will call {real} instead.",
        ]);
        Ok(template.replace("{fake}", fake).replace("{real}", real))
    }
}

/// Backend-driven generator for realistic step content. Each call asks the
/// chat model for a single sentence; randomness still flows through the
/// passed generator only in that prompts are deterministic given it.
pub struct RemoteGenerator {
    client: ChatClient,
}

impl RemoteGenerator {
    pub fn new(client: ChatClient) -> Self {
        RemoteGenerator { client }
    }

    fn one_line(&self, instruction: String) -> Result<String, AugmentError> {
        let reply = self
            .client
            .chat_complete(&[ChatMessage::user(instruction)])
            .map_err(|e| AugmentError::Generator(e.to_string()))?;
        reply
            .text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .ok_or_else(|| AugmentError::Generator("backend returned an empty reply".into()))
    }
}

impl StepGenerator for RemoteGenerator {
    fn inefficient_thought(
        &self,
        _rng: &mut dyn RngCore,
        duplicated: &Step,
    ) -> Result<String, AugmentError> {
        self.one_line(format!(
            "Write one first-person sentence in which an agent decides to repeat \
             the tool call below even though it already succeeded. Reply with the \
             sentence only.\n\nTool: {}\nInput: {}",
            duplicated.action, duplicated.action_input
        ))
    }

    fn hallucinated_thought(
        &self,
        _rng: &mut dyn RngCore,
        t: &Trajectory,
    ) -> Result<String, AugmentError> {
        self.one_line(format!(
            "Write one first-person sentence in which an agent confidently states \
             a specific fact that does NOT appear in any observation below. Reply \
             with the sentence only.\n\nQuery: {}\nObservations:\n{}",
            t.query.text,
            t.steps
                .iter()
                .filter_map(|s| s.observation.as_deref())
                .collect::<Vec<_>>()
                .join("\n"),
        ))
    }

    fn probe_thought(&self, _rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError> {
        self.one_line(format!(
            "Write one first-person sentence in which an agent decides to try a \
             tool named {fake}. Reply with the sentence only."
        ))
    }

    fn retry_thought(&self, _rng: &mut dyn RngCore, fake: &str) -> Result<String, AugmentError> {
        self.one_line(format!(
            "Write one first-person sentence in which an agent, after a tool call \
             failed, decides to repeat the exact same call to {fake}. Reply with \
             the sentence only."
        ))
    }

    fn recovery_thought(
        &self,
        _rng: &mut dyn RngCore,
        fake: &str,
        real: &str,
    ) -> Result<String, AugmentError> {
        self.one_line(format!(
            "Write one first-person sentence in which an agent notes that the tool \
             {fake} is unavailable and switches to {real} instead. Reply with the \
             sentence only."
        ))
    }
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    pub dialect: Dialect,
    /// Cap on enumerated orders per clean trajectory.
    pub path_limit: usize,
    pub inefficient_per_path: usize,
    pub hallucination_per_path: usize,
    pub adaptivity_per_path: usize,
    /// Chance that an adaptivity injection takes the non-adaptive shape
    /// (verbatim retry before recovery), so both label classes occur.
    pub nonadaptive_ratio: f64,
    pub fake_map: FakeToolMap,
    pub seed: u64,
    /// Emit each clean trajectory unchanged (id-tagged `::orig`) alongside
    /// its augmented paths.
    pub keep_originals: bool,
    pub patterns: FailurePatterns,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            dialect: Dialect::MetaGta,
            path_limit: 3,
            inefficient_per_path: 1,
            hallucination_per_path: 1,
            adaptivity_per_path: 1,
            nonadaptive_ratio: 0.5,
            fake_map: FakeToolMap::default(),
            seed: 0,
            keep_originals: true,
            patterns: FailurePatterns::default(),
        }
    }
}

/// Builds a labeled dataset from clean trajectories: enumerate orders,
/// inject flaws per path, recount everything into a manifest. Each clean
/// trajectory draws its randomness from a stream seeded by the global seed
/// and its own id, so output bytes depend only on inputs and options.
pub fn augment_dataset(
    clean: &[Trajectory],
    generator: &dyn StepGenerator,
    opts: &AugmentOptions,
) -> Result<(Vec<Trajectory>, DatasetManifest), AugmentError> {
    if !(0.0..=1.0).contains(&opts.nonadaptive_ratio) {
        return Err(AugmentError::Config(format!(
            "nonadaptive_ratio {} outside 0..=1",
            opts.nonadaptive_ratio
        )));
    }
    if opts.dialect == Dialect::MetaMms
        && (opts.hallucination_per_path > 0 || opts.adaptivity_per_path > 0)
    {
        return Err(AugmentError::Config(
            "thought-free datasets support only inefficiency injection".into(),
        ));
    }

    let mut out = Vec::new();
    for base in clean {
        let violations = validate_structure(base);
        if let Some(v) = violations.first() {
            return Err(AugmentError::Config(format!(
                "clean trajectory '{}' is invalid: {v}",
                base.id()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ fnv1a(base.id()));
        let graph = infer_dependencies(base);
        let orders = enumerate_valid_orders(base, &graph, opts.path_limit)?;

        if opts.keep_originals {
            let mut original = base.clone();
            original.query.id = format!("{}::orig", base.id());
            out.push(original);
        }
        for (k, order) in orders.into_iter().enumerate() {
            let mut path = order;
            path.query.id = format!("{}::p{}", base.id(), k + 1);
            if opts.dialect == Dialect::MetaGta {
                path.toolset =
                    make_fake_toolset(&path.toolset, &opts.fake_map.restricted_to(&path.toolset))?;
                for _ in 0..opts.adaptivity_per_path {
                    path = inject_one_adaptivity(&path, generator, opts, &mut rng)?;
                }
            }
            for _ in 0..opts.inefficient_per_path {
                path = inject_one_inefficient(&path, generator, opts, &mut rng)?;
            }
            if opts.dialect == Dialect::MetaGta {
                for _ in 0..opts.hallucination_per_path {
                    path = inject_one_hallucination(&path, generator, opts, &mut rng)?;
                }
            }
            debug_assert!(
                validate_structure(&path).is_empty(),
                "augmented trajectory '{}' violates structure: {:?}",
                path.id(),
                validate_structure(&path)
            );
            out.push(path);
        }
    }

    let manifest = DatasetManifest::recount(opts.dialect, &out, &opts.patterns)
        .map_err(|e| AugmentError::Config(format!("manifest recount failed: {e}")))?;
    Ok((out, manifest))
}

fn inject_one_adaptivity(
    t: &Trajectory,
    generator: &dyn StepGenerator,
    opts: &AugmentOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, AugmentError> {
    let candidates: Vec<usize> = t
        .tool_steps()
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.labels.is_none()
                && s.observation.as_deref().map_or(false, |o| !opts.patterns.is_failure(o))
                && opts.fake_map.fake_for(&s.action).is_some()
                && t.tool_def(&s.action).is_some()
        })
        .map(|(i, _)| i + 1)
        .collect();
    let &position = candidates
        .get(rng.gen_range(0..candidates.len().max(1)))
        .ok_or_else(|| {
            AugmentError::Config(format!("no adaptivity target in '{}'", t.id()))
        })?;
    let real = t.steps[position - 1].action.clone();
    let fake = opts
        .fake_map
        .fake_for(&real)
        .expect("candidate filtered on fake mapping")
        .to_string();
    let adaptive = !rng.gen_bool(opts.nonadaptive_ratio);
    let plan = InjectionPlan {
        position,
        payload: InjectionPayload::Adaptivity {
            probe_thought: generator.probe_thought(rng, &fake)?,
            retry_thought: generator.retry_thought(rng, &fake)?,
            recovery_thought: generator.recovery_thought(rng, &fake, &real)?,
            fake,
            adaptive,
        },
    };
    inject_step(t, &plan)
}

fn inject_one_inefficient(
    t: &Trajectory,
    generator: &dyn StepGenerator,
    opts: &AugmentOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, AugmentError> {
    let candidates: Vec<usize> = t
        .tool_steps()
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let next_adaptive = t.steps[i + 1].has_adaptive_label();
            let failed = s.observation.as_deref().map_or(true, |o| opts.patterns.is_failure(o));
            !failed && !next_adaptive
        })
        .map(|(i, _)| i + 1)
        .collect();
    let &source = candidates
        .get(rng.gen_range(0..candidates.len().max(1)))
        .ok_or_else(|| {
            AugmentError::Config(format!("no duplication source in '{}'", t.id()))
        })?;
    let thought = if opts.dialect == Dialect::MetaMms {
        String::new()
    } else {
        generator.inefficient_thought(rng, &t.steps[source - 1])?
    };
    let plan = InjectionPlan {
        position: source + 1,
        payload: InjectionPayload::Inefficient { source, thought },
    };
    inject_step(t, &plan)
}

fn inject_one_hallucination(
    t: &Trajectory,
    generator: &dyn StepGenerator,
    opts: &AugmentOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, AugmentError> {
    let candidates: Vec<usize> = t
        .tool_steps()
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.labels.is_none()
                && s.observation.as_deref().map_or(false, |o| !opts.patterns.is_failure(o))
        })
        .map(|(i, _)| i + 1)
        .collect();
    let &position = candidates
        .get(rng.gen_range(0..candidates.len().max(1)))
        .ok_or_else(|| {
            AugmentError::Config(format!("no hallucination target in '{}'", t.id()))
        })?;
    let plan = InjectionPlan {
        position,
        payload: InjectionPayload::Hallucination {
            thought: generator.hallucinated_thought(rng, t)?,
        },
    };
    inject_step(t, &plan)
}

/// Stable 64-bit FNV-1a hash; ties a trajectory's randomness stream to its
/// id without depending on the standard hasher's unstable output.
fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
