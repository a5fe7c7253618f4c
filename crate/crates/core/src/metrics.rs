//! Pure scoring functions: efficiency, hallucination, adaptivity, answer
//! accuracy, instruction errors, and usage statistics.
//!
//! Everything here is a deterministic function of a trajectory plus judge
//! verdicts — no I/O, no backends — so scores are trivially parallelizable
//! per trajectory and easy to audit. Aggregation policy (which trajectories
//! contribute to which mean) lives with the report builder; the one rule
//! enforced here is that absent values stay absent: an incorrect answer has
//! no efficiency score and a failure-free trajectory has no adaptivity
//! score, rather than a misleading zero.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::embedding::{cosine, EmbedError, Embedder};
use crate::evidence::EvidenceBank;
use crate::failure::FailurePatterns;
use crate::judge::{AdaptivityVerdict, GroundingVerdict, MinimalEvidenceVerdict};
use crate::trajectory::{compact_json, normalize_answer, AnswerType, Query, Trajectory};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("verdict named indices {indices:?} outside the {bank_len}-entry bank")]
    InvalidIndices { indices: Vec<usize>, bank_len: usize },
    #[error("expected {expected} {what} verdicts, got {got}")]
    ArityMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("query '{query_id}' has no gold answer")]
    MissingGold { query_id: String },
    #[error(transparent)]
    Embedder(#[from] EmbedError),
    #[error("cannot aggregate an empty sample set")]
    EmptyInput,
}

/// Per-trajectory metric bundle. `efficiency` is absent when the answer was
/// wrong; `adaptivity` is absent when no tool call failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceScores {
    pub efficiency: Option<f64>,
    pub hallucination: f64,
    pub adaptivity: Option<f64>,
    pub failure_indices: BTreeSet<usize>,
}

// ---------------------------------------------------------------------------
// Core trajectory metrics
// ---------------------------------------------------------------------------

/// Efficiency: |minimal evidence| / |all evidence|, scored only for correct
/// answers. A correct answer with an empty bank is perfectly efficient —
/// no step was wasted because no step was taken.
pub fn efficiency_score(
    bank: &EvidenceBank,
    verdict: &MinimalEvidenceVerdict,
    answer_correct: bool,
) -> Result<Option<f64>, MetricError> {
    let valid: BTreeSet<usize> = bank.indices().into_iter().collect();
    let bad: Vec<usize> = verdict
        .minimal_indices
        .iter()
        .copied()
        .filter(|i| !valid.contains(i))
        .collect();
    if !bad.is_empty() {
        return Err(MetricError::InvalidIndices {
            indices: bad,
            bank_len: bank.len(),
        });
    }
    if !answer_correct {
        return Ok(None);
    }
    if bank.is_empty() {
        return Ok(Some(1.0));
    }
    Ok(Some(verdict.minimal_indices.len() as f64 / bank.len() as f64))
}

/// Hallucination rate: ungrounded thoughts / n, over all n steps. Note that
/// reports publish the complement (1 − rate) as the hallucination reduction
/// score.
pub fn hallucination_score(
    verdicts: &[GroundingVerdict],
    n: usize,
) -> Result<f64, MetricError> {
    if verdicts.len() != n {
        return Err(MetricError::ArityMismatch {
            what: "grounding",
            expected: n,
            got: verdicts.len(),
        });
    }
    let covered: BTreeSet<usize> = verdicts.iter().map(|v| v.step).collect();
    if covered != (1..=n).collect() {
        return Err(MetricError::ArityMismatch {
            what: "grounding",
            expected: n,
            got: covered.len(),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let ungrounded = verdicts.iter().filter(|v| !v.grounded).count();
    Ok(ungrounded as f64 / n as f64)
}

/// Steps whose observation matches a failure pattern (the set F).
pub fn detect_failures(t: &Trajectory, patterns: &FailurePatterns) -> BTreeSet<usize> {
    t.steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.observation.as_deref().map_or(false, |o| patterns.is_failure(o)))
        .map(|(i, _)| i + 1)
        .collect()
}

/// Mean adaptive flag over the failure set F; absent (never zero) when no
/// tool call failed.
pub fn adaptivity_score(
    verdicts: &[AdaptivityVerdict],
    failures: &BTreeSet<usize>,
) -> Result<Option<f64>, MetricError> {
    if verdicts.len() != failures.len() {
        return Err(MetricError::ArityMismatch {
            what: "adaptivity",
            expected: failures.len(),
            got: verdicts.len(),
        });
    }
    let covered: BTreeSet<usize> = verdicts.iter().map(|v| v.failure_step).collect();
    if covered != *failures {
        return Err(MetricError::ArityMismatch {
            what: "adaptivity",
            expected: failures.len(),
            got: covered.len(),
        });
    }
    if failures.is_empty() {
        return Ok(None);
    }
    let adaptive = verdicts.iter().filter(|v| v.adaptive).count();
    Ok(Some(adaptive as f64 / failures.len() as f64))
}

// ---------------------------------------------------------------------------
// Answer accuracy
// ---------------------------------------------------------------------------

/// Scores a predicted answer against the query's gold answer. Multiple
/// choice is binary on the normalized choice (letter or full text);
/// similarity types score embedding cosine clamped to [0,1] so they compose
/// with binary scores in one micro-average.
pub fn answer_accuracy(
    pred: &str,
    q: &Query,
    embedder: &dyn Embedder,
) -> Result<f64, MetricError> {
    let gold = q.gold.as_deref().ok_or_else(|| MetricError::MissingGold {
        query_id: q.id.clone(),
    })?;
    match q.answer_type {
        AnswerType::Mcq => {
            let choices = q.mcq_choices();
            let resolve = |answer: &str| -> Option<char> {
                let norm = normalize_answer(answer);
                choices
                    .iter()
                    .find(|(letter, text)| {
                        norm == letter.to_lowercase().to_string() || norm == normalize_answer(text)
                    })
                    .map(|(letter, _)| *letter)
            };
            let matched = if choices.is_empty() {
                normalize_answer(pred) == normalize_answer(gold)
            } else {
                match (resolve(pred), resolve(gold)) {
                    (Some(p), Some(g)) => p == g,
                    _ => false,
                }
            };
            Ok(if matched { 1.0 } else { 0.0 })
        }
        AnswerType::Ltr | AnswerType::Img => {
            let sim = cosine(&embedder.embed(pred)?, &embedder.embed(gold)?)?;
            Ok(sim.clamp(0.0, 1.0))
        }
    }
}

/// For image queries the answer is the producing tool call, not text:
/// returns the serialized arguments of the last toolset call whose
/// observation is not a failure, falling back to the last toolset call, or
/// `None` when no tool from the toolset was called at all.
pub fn img_prediction(t: &Trajectory, patterns: &FailurePatterns) -> Option<String> {
    let in_toolset: Vec<_> = t
        .tool_steps()
        .iter()
        .filter(|s| t.tool_def(&s.action).is_some())
        .collect();
    let chosen = in_toolset
        .iter()
        .rev()
        .find(|s| s.observation.as_deref().map_or(true, |o| !patterns.is_failure(o)))
        .or_else(|| in_toolset.last());
    chosen.map(|s| compact_json(&s.action_input))
}

/// Similarity threshold above which an LTR/IMG answer counts as correct.
pub const DEFAULT_CORRECT_THRESHOLD: f64 = 0.5;

/// Scores a whole trajectory's answer: the final answer text for MCQ/LTR,
/// the producing tool call's arguments for IMG. Runs cut off by the turn
/// limit or aborted score 0 — an unanswered query is a wrong answer.
pub fn answer_score(
    t: &Trajectory,
    embedder: &dyn Embedder,
    patterns: &FailurePatterns,
) -> Result<f64, MetricError> {
    if t.meta.terminated_by != crate::trajectory::Termination::Answer {
        return Ok(0.0);
    }
    match t.query.answer_type {
        AnswerType::Img => {
            let pred = img_prediction(t, patterns).unwrap_or_default();
            answer_accuracy(&pred, &t.query, embedder)
        }
        _ => answer_accuracy(&t.final_answer, &t.query, embedder),
    }
}

/// Binary correctness rule on an already-computed score: exact for MCQ,
/// thresholded for the similarity-scored types.
pub fn correct_from_score(answer_type: AnswerType, score: f64, threshold: f64) -> bool {
    match answer_type {
        AnswerType::Mcq => score == 1.0,
        AnswerType::Ltr | AnswerType::Img => score >= threshold,
    }
}

/// Binary correctness from [`answer_score`].
pub fn answer_correct(
    t: &Trajectory,
    embedder: &dyn Embedder,
    patterns: &FailurePatterns,
    threshold: f64,
) -> Result<bool, MetricError> {
    let score = answer_score(t, embedder, patterns)?;
    Ok(correct_from_score(t.query.answer_type, score, threshold))
}

/// One sample's score with the answer type it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypedScore {
    pub answer_type: AnswerType,
    pub score: f64,
}

/// Per-type means plus the overall micro-average.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyScore {
    pub per_type: BTreeMap<AnswerType, f64>,
    pub overall: f64,
}

/// Micro-average: unweighted mean over all samples regardless of type.
pub fn overall_accuracy(samples: &[TypedScore]) -> Result<f64, MetricError> {
    if samples.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64)
}

pub fn accuracy_breakdown(samples: &[TypedScore]) -> Result<AccuracyScore, MetricError> {
    let overall = overall_accuracy(samples)?;
    let mut sums: BTreeMap<AnswerType, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let slot = sums.entry(s.answer_type).or_insert((0.0, 0));
        slot.0 += s.score;
        slot.1 += 1;
    }
    let per_type = sums
        .into_iter()
        .map(|(ty, (sum, count))| (ty, sum / count as f64))
        .collect();
    Ok(AccuracyScore { per_type, overall })
}

// ---------------------------------------------------------------------------
// Instruction errors and usage
// ---------------------------------------------------------------------------

/// Counts of instruction-following failures, each reported as a ratio of
/// total step count n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionErrors {
    pub nonexistent_tool: usize,
    pub bad_arguments: usize,
    pub n: usize,
}

impl InstructionErrors {
    pub fn nonexistent_ratio(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.nonexistent_tool as f64 / self.n as f64
        }
    }

    pub fn bad_arguments_ratio(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.bad_arguments as f64 / self.n as f64
        }
    }
}

/// Counts steps naming a tool outside the toolset (terminal marker
/// excluded) and steps whose arguments break the named tool's parameter
/// schema. Labels are never consulted.
pub fn instruction_errors(t: &Trajectory) -> InstructionErrors {
    let mut nonexistent_tool = 0;
    let mut bad_arguments = 0;
    for step in &t.steps {
        if step.is_terminal() {
            continue;
        }
        match t.tool_def(&step.action) {
            None => nonexistent_tool += 1,
            Some(def) => {
                if def.validate_args(&step.action_input).is_err() {
                    bad_arguments += 1;
                }
            }
        }
    }
    InstructionErrors {
        nonexistent_tool,
        bad_arguments,
        n: t.n(),
    }
}

/// Pluggable token counting for backends that do not report usage.
pub trait TokenCounter {
    fn count(&self, text: &str) -> u64;
}

/// The declared fallback estimator: ceil(chars / 4).
#[derive(Debug, Clone, Copy, Default)]
pub struct CharEstimator;

impl TokenCounter for CharEstimator {
    fn count(&self, text: &str) -> u64 {
        (text.chars().count() as u64).div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UsageStats {
    /// Reasoning steps involving a tool call.
    pub turns: u64,
    pub output_tokens: u64,
}

/// Turn count plus output tokens — the recorded number when the backend
/// reported one, otherwise an estimate over the agent's own output (thought,
/// action, input; observations are the environment's, not the agent's).
pub fn usage_stats(t: &Trajectory, counter: &dyn TokenCounter) -> UsageStats {
    let turns = t.tool_steps().len() as u64;
    let output_tokens = t.meta.output_tokens.unwrap_or_else(|| {
        let mut text = String::new();
        for step in &t.steps {
            text.push_str(&step.thought);
            text.push_str(&step.action);
            text.push_str(&compact_json(&step.action_input));
        }
        counter.count(&text)
    });
    UsageStats { turns, output_tokens }
}
