//! Cumulative evidence record built from a trajectory's tool interactions.
//!
//! Every non-terminal step contributes one entry — the (action, input,
//! observation) triple copied verbatim — and entries stay positionally
//! indexed so judges can answer with index subsets. Duplicate triples at
//! different steps remain distinct entries: a repeated redundant call is
//! exactly what the efficiency metric has to count.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::trajectory::{compact_json, Trajectory};

/// Byte budget for one rendered observation; beyond it the tail is elided.
pub const DEFAULT_RENDER_OBS_LIMIT: usize = 4096;

const TRUNCATION_MARKER: &str = "…[truncated]";

/// One piece of evidence: what was called, with what input, and what came
/// back. `index` is the 1-based step that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub index: usize,
    pub action: String,
    pub input: Value,
    pub observation: String,
}

impl Evidence {
    /// One render line: `[k] tool=<action> input=<input> output=<observation>`.
    pub fn render_line(&self, obs_limit: usize) -> String {
        format!(
            "[{}] tool={} input={} output={}",
            self.index,
            self.action,
            compact_json(&self.input),
            render_observation(&self.observation, obs_limit),
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("snapshot index {requested} exceeds bank size {len}")]
    IndexOutOfRange { requested: usize, len: usize },
}

/// Ordered record of everything the agent has learned from its tools.
/// Immutable after build; safe to share across judge workers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvidenceBank {
    entries: Vec<Evidence>,
}

impl EvidenceBank {
    /// Collects one entry per tool step, in step order. The terminal answer
    /// step contributes nothing; thoughts are never read.
    pub fn build(t: &Trajectory) -> Self {
        let entries = t
            .tool_steps()
            .iter()
            .enumerate()
            .map(|(i, step)| Evidence {
                index: i + 1,
                action: step.action.clone(),
                input: step.action_input.clone(),
                observation: step.observation.clone().unwrap_or_default(),
            })
            .collect();
        EvidenceBank { entries }
    }

    pub fn from_entries(entries: Vec<Evidence>) -> Self {
        EvidenceBank { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Evidence] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> Option<&Evidence> {
        self.entries.get(index.checked_sub(1)?)
    }

    /// The 1-based indices present in the bank, in order.
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// The cumulative record as of step `upto`: entries with index ≤ `upto`.
    /// `snapshot(0)` is the empty pre-run state.
    pub fn snapshot(&self, upto: usize) -> Result<EvidenceBank, SnapshotError> {
        if upto > self.entries.len() {
            return Err(SnapshotError::IndexOutOfRange {
                requested: upto,
                len: self.entries.len(),
            });
        }
        Ok(EvidenceBank {
            entries: self.entries[..upto].to_vec(),
        })
    }

    /// Renders the bank for judge consumption with the default observation
    /// budget. One line per entry:
    ///
    /// ```text
    /// [k] tool=<action> input=<input> output=<observation>
    /// ```
    ///
    /// An empty bank renders as `(no evidence)`. Stored data is never
    /// truncated — only this view is.
    pub fn render_structured(&self) -> String {
        self.render_structured_with_limit(DEFAULT_RENDER_OBS_LIMIT)
    }

    /// As [`render_structured`](Self::render_structured) with an explicit
    /// per-observation byte budget.
    pub fn render_structured_with_limit(&self, obs_limit: usize) -> String {
        if self.entries.is_empty() {
            return "(no evidence)".to_string();
        }
        self.entries
            .iter()
            .map(|e| e.render_line(obs_limit))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Keeps each observation on its own render line (newlines escaped) and
/// elides anything past the byte budget with a marker.
fn render_observation(obs: &str, limit: usize) -> String {
    let escaped = obs.replace('\\', "\\\\").replace('\n', "\\n");
    if escaped.len() <= limit {
        return escaped;
    }
    let mut cut = limit;
    while cut > 0 && !escaped.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}{TRUNCATION_MARKER}", &escaped[..cut])
}
