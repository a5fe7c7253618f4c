//! Meta-evaluation: scoring the evaluator itself against labeled datasets.
//!
//! Labeled trajectories carry ground-truth hallucination, inefficiency, and
//! adaptivity annotations. The judge's verdicts are compared against them
//! to produce per-trajectory agreement rates, macro-averaged into dataset
//! accuracy. Two dataset dialects are supported: `meta_gta` — full
//! reasoning traces covering all three label kinds — and `meta_mms` —
//! thought-free traces where only inefficiency applies and the agreement
//! rule is binary exact-count match.
//!
//! Trajectories the judge errored on are reported separately and excluded
//! from accuracy means rather than scored as disagreement.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::BagOfTokensEmbedder;
use crate::evidence::EvidenceBank;
use crate::failure::FailurePatterns;
use crate::judge::{
    AdaptivityRequest, AdaptivityVerdict, EvidenceMode, GroundingRequest, GroundingVerdict,
    Judge, JudgeError, MinimalEvidenceRequest, MinimalEvidenceVerdict,
};
use crate::metrics::{answer_correct, detect_failures, MetricError, DEFAULT_CORRECT_THRESHOLD};
use crate::trajectory::{parse_trajectory, DatasetError, Trajectory, TrajectoryFormat};
use crate::worker::parallel_map;

/// The two labeled-dataset styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    /// Full reasoning traces; hallucination, inefficiency, and adaptivity
    /// labels all apply.
    MetaGta,
    /// Thought-free traces; only inefficiency labels apply and efficiency
    /// agreement is binary on the exact inefficient-step count.
    MetaMms,
}

impl std::str::FromStr for Dialect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meta_gta" => Ok(Dialect::MetaGta),
            "meta_mms" => Ok(Dialect::MetaMms),
            other => Err(format!("unknown dialect '{other}' (expected meta_gta or meta_mms)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {detail}")]
    DialectMismatch { path: String, detail: String },
    #[error("{path}: {detail}")]
    MissingLabels { path: String, detail: String },
    #[error("manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error(transparent)]
    Score(#[from] MetricError),
    #[error("emitting report: {0}")]
    Emit(String),
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub dialect: Dialect,
    pub trajectories: Vec<Trajectory>,
    pub path: PathBuf,
}

/// Optional first line of a labeled dataset declaring its dialect; any
/// object without a `steps` key is treated as a header.
#[derive(Debug, Deserialize)]
struct HeaderLine {
    dialect: Dialect,
}

/// Loads a labeled NDJSON dataset and enforces its dialect rules.
///
/// Dialect resolution order: the `forced` argument, a `{"dialect": ...}`
/// header line, a manifest sidecar (`<stem>.manifest.json`), then inference
/// from the data (thought-free and free of hallucination/adaptivity labels
/// means `meta_mms`).
pub fn load_labeled_dataset(
    path: &Path,
    forced: Option<Dialect>,
) -> Result<LabeledDataset, MetaError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut header_dialect = None;
    let mut trajectories = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 && trajectories.is_empty() {
            if let Some(h) = parse_header(line) {
                header_dialect = Some(h.dialect);
                continue;
            }
        }
        let t = parse_trajectory(line.as_bytes(), TrajectoryFormat::Json).map_err(|source| {
            DatasetError::Record {
                path: path.display().to_string(),
                line: i + 1,
                source,
            }
        })?;
        trajectories.push(t);
    }

    let dialect = forced
        .or(header_dialect)
        .or_else(|| manifest_sidecar_path(path).and_then(|p| {
            DatasetManifest::load(&p).ok().map(|m| m.dialect)
        }))
        .unwrap_or_else(|| infer_dialect(&trajectories));

    let dataset = LabeledDataset {
        dialect,
        trajectories,
        path: path.to_path_buf(),
    };
    validate_dialect(&dataset)?;
    Ok(dataset)
}

fn parse_header(line: &str) -> Option<HeaderLine> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    if value.get("steps").is_some() {
        return None;
    }
    serde_json::from_value(value).ok()
}

/// Manifest path convention: `<stem>.manifest.json` beside the dataset.
pub fn manifest_sidecar_path(dataset: &Path) -> Option<PathBuf> {
    let stem = dataset.file_stem()?.to_str()?;
    Some(dataset.with_file_name(format!("{stem}.manifest.json")))
}

fn infer_dialect(trajectories: &[Trajectory]) -> Dialect {
    let thought_free = trajectories
        .iter()
        .all(|t| t.steps.iter().all(|s| s.thought.is_empty()));
    let reasoning_labels = trajectories.iter().any(|t| {
        t.steps.iter().any(|s| {
            s.labels
                .map_or(false, |l| l.hallucination.is_some() || l.adaptive.is_some())
        })
    });
    if thought_free && !reasoning_labels {
        Dialect::MetaMms
    } else {
        Dialect::MetaGta
    }
}

fn validate_dialect(dataset: &LabeledDataset) -> Result<(), MetaError> {
    let path = dataset.path.display().to_string();
    match dataset.dialect {
        Dialect::MetaGta => {
            let counts = label_counts(&dataset.trajectories);
            let mut missing = Vec::new();
            if counts.hallucination_steps == 0 {
                missing.push("hallucination");
            }
            if counts.inefficient_steps == 0 {
                missing.push("inefficiency");
            }
            if counts.adaptivity_steps == 0 {
                missing.push("adaptivity");
            }
            if !missing.is_empty() {
                return Err(MetaError::MissingLabels {
                    path,
                    detail: format!("meta_gta dataset has no {} labels", missing.join("/")),
                });
            }
        }
        Dialect::MetaMms => {
            for t in &dataset.trajectories {
                for (i, step) in t.steps.iter().enumerate() {
                    let labels = step.labels.unwrap_or_default();
                    if labels.hallucination.is_some() || labels.adaptive.is_some() {
                        return Err(MetaError::DialectMismatch {
                            path: path.clone(),
                            detail: format!(
                                "trajectory '{}' step {} carries reasoning-dependent labels",
                                t.query.id,
                                i + 1
                            ),
                        });
                    }
                    if !step.thought.is_empty() {
                        return Err(MetaError::DialectMismatch {
                            path: path.clone(),
                            detail: format!(
                                "trajectory '{}' step {} carries a thought",
                                t.query.id,
                                i + 1
                            ),
                        });
                    }
                }
            }
            if label_counts(&dataset.trajectories).inefficient_steps == 0 {
                return Err(MetaError::MissingLabels {
                    path,
                    detail: "meta_mms dataset has no inefficiency labels".into(),
                });
            }
        }
    }
    Ok(())
}

struct LabelCounts {
    hallucination_steps: usize,
    inefficient_steps: usize,
    adaptivity_steps: usize,
}

fn label_counts(trajectories: &[Trajectory]) -> LabelCounts {
    let mut counts = LabelCounts {
        hallucination_steps: 0,
        inefficient_steps: 0,
        adaptivity_steps: 0,
    };
    for t in trajectories {
        for step in &t.steps {
            let labels = step.labels.unwrap_or_default();
            if labels.hallucination == Some(true) {
                counts.hallucination_steps += 1;
            }
            if labels.inefficient == Some(true) {
                counts.inefficient_steps += 1;
            }
            if labels.adaptive.is_some() {
                counts.adaptivity_steps += 1;
            }
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

/// Declared statistics for a labeled dataset. Absent fields are not
/// checked; present fields must match a recount exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dialect: Dialect,
    pub total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub originals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmented: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inefficient_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptivity_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_observations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unavailable_tools: Option<usize>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, MetaError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetaError::Manifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| MetaError::Manifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MetaError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| MetaError::Emit(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| MetaError::Manifest {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Recomputes every statistic from the trajectories themselves.
    /// Correctness uses the deterministic offline embedder so recounts are
    /// reproducible anywhere.
    pub fn recount(
        dialect: Dialect,
        trajectories: &[Trajectory],
        patterns: &FailurePatterns,
    ) -> Result<Self, MetaError> {
        let counts = label_counts(trajectories);
        let mut correct = 0;
        let mut failure_observations = 0;
        let mut fake_tools: BTreeSet<&str> = BTreeSet::new();
        for t in trajectories {
            if answer_correct(t, &BagOfTokensEmbedder, patterns, DEFAULT_CORRECT_THRESHOLD)? {
                correct += 1;
            }
            failure_observations += detect_failures(t, patterns).len();
            for tool in &t.toolset {
                if !tool.available {
                    fake_tools.insert(&tool.name);
                }
            }
        }
        let (originals, augmented) = split_by_origin(trajectories);
        Ok(DatasetManifest {
            dialect,
            total: trajectories.len(),
            originals: Some(originals),
            augmented: Some(augmented),
            correct: Some(correct),
            inefficient_steps: Some(counts.inefficient_steps),
            hallucination_steps: Some(counts.hallucination_steps),
            adaptivity_steps: Some(counts.adaptivity_steps),
            failure_observations: Some(failure_observations),
            unavailable_tools: Some(fake_tools.len()),
        })
    }

    /// Field-by-field comparison against a recount; returns one line per
    /// declared statistic that disagrees.
    pub fn diff(&self, actual: &DatasetManifest) -> Vec<String> {
        let mut out = Vec::new();
        if self.dialect != actual.dialect {
            out.push(format!(
                "dialect: declared {:?}, actual {:?}",
                self.dialect, actual.dialect
            ));
        }
        if self.total != actual.total {
            out.push(format!("total: declared {}, actual {}", self.total, actual.total));
        }
        let fields: [(&str, Option<usize>, Option<usize>); 8] = [
            ("originals", self.originals, actual.originals),
            ("augmented", self.augmented, actual.augmented),
            ("correct", self.correct, actual.correct),
            ("inefficient_steps", self.inefficient_steps, actual.inefficient_steps),
            ("hallucination_steps", self.hallucination_steps, actual.hallucination_steps),
            ("adaptivity_steps", self.adaptivity_steps, actual.adaptivity_steps),
            ("failure_observations", self.failure_observations, actual.failure_observations),
            ("unavailable_tools", self.unavailable_tools, actual.unavailable_tools),
        ];
        for (name, declared, recounted) in fields {
            if let (Some(d), Some(a)) = (declared, recounted) {
                if d != a {
                    out.push(format!("{name}: declared {d}, actual {a}"));
                }
            }
        }
        out
    }
}

/// Augmented trajectories carry a `::p<k>` id suffix; everything else is an
/// original.
fn split_by_origin(trajectories: &[Trajectory]) -> (usize, usize) {
    let augmented = trajectories
        .iter()
        .filter(|t| {
            t.query
                .id
                .rsplit_once("::")
                .map_or(false, |(_, tag)| tag.starts_with('p'))
        })
        .count();
    (trajectories.len() - augmented, augmented)
}

// ---------------------------------------------------------------------------
// Verdict collection
// ---------------------------------------------------------------------------

/// All verdicts the judge produced for one trajectory, with the time spent
/// inside judge calls (and nothing else).
#[derive(Debug, Clone)]
pub struct VerdictSet {
    pub grounding: Vec<GroundingVerdict>,
    pub min_evidence: MinimalEvidenceVerdict,
    pub adaptivity: Vec<AdaptivityVerdict>,
    pub failures: BTreeSet<usize>,
    pub judge_seconds: f64,
}

/// Runs the judge over one trajectory: a grounding verdict per step (when
/// requested), one minimal-evidence selection, and an adaptivity verdict
/// per failure (when requested). Steps with empty thoughts are trivially
/// grounded and never reach the backend.
pub fn collect_verdicts(
    t: &Trajectory,
    judge: &dyn Judge,
    mode: EvidenceMode,
    patterns: &FailurePatterns,
    with_grounding: bool,
    with_adaptivity: bool,
) -> Result<VerdictSet, JudgeError> {
    let bank = EvidenceBank::build(t);
    let mut judge_seconds = 0.0;
    let timed = |out: &mut f64, start: Instant| *out += start.elapsed().as_secs_f64();

    let mut grounding = Vec::new();
    if with_grounding {
        for (i, step) in t.steps.iter().enumerate() {
            let step_no = i + 1;
            if step.thought.is_empty() {
                grounding.push(GroundingVerdict {
                    step: step_no,
                    grounded: true,
                    rationale: None,
                });
                continue;
            }
            let snapshot = bank.snapshot(i).expect("snapshot within bank");
            let started = Instant::now();
            let verdict = judge.is_grounded(&GroundingRequest {
                trajectory_id: t.id(),
                step: step_no,
                query: &t.query,
                thought: &step.thought,
                evidence: &snapshot,
            })?;
            timed(&mut judge_seconds, started);
            grounding.push(verdict);
        }
    }

    let dialog = t.render_dialog();
    let started = Instant::now();
    let min_evidence = judge.select_minimal_evidence(&MinimalEvidenceRequest {
        trajectory_id: t.id(),
        query: &t.query,
        final_answer: &t.final_answer,
        bank: &bank,
        mode,
        dialog: &dialog,
    })?;
    timed(&mut judge_seconds, started);

    let failures = detect_failures(t, patterns);
    let mut adaptivity = Vec::new();
    if with_adaptivity {
        for &failure_step in &failures {
            let failure = bank
                .get(failure_step)
                .expect("failure index within bank");
            let next_step = &t.steps[failure_step];
            let started = Instant::now();
            let verdict = judge.judge_adaptivity(&AdaptivityRequest {
                trajectory_id: t.id(),
                query: &t.query,
                failure,
                next_step,
            })?;
            timed(&mut judge_seconds, started);
            adaptivity.push(verdict);
        }
    }

    Ok(VerdictSet {
        grounding,
        min_evidence,
        adaptivity,
        failures,
        judge_seconds,
    })
}

// ---------------------------------------------------------------------------
// Agreement scoring
// ---------------------------------------------------------------------------

/// Per-step agreement between predicted hallucinations (`!grounded`) and
/// labels, over all n steps.
pub fn acc_hallucination(
    verdicts: &[GroundingVerdict],
    labels: &[bool],
) -> Result<f64, MetricError> {
    let n = labels.len();
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
        return Ok(1.0);
    }
    let mut by_step = vec![false; n];
    for v in verdicts {
        by_step[v.step - 1] = !v.grounded;
    }
    let agree = by_step
        .iter()
        .zip(labels)
        .filter(|(pred, label)| pred == label)
        .count();
    Ok(agree as f64 / n as f64)
}

/// Per-entry agreement between predicted inefficiency (entry excluded from
/// the minimal set) and labels, over the evidence-bearing steps. Absent
/// when the trajectory took no tool step.
pub fn acc_efficiency_gta(
    verdict: &MinimalEvidenceVerdict,
    labels: &[bool],
) -> Result<Option<f64>, MetricError> {
    let len = labels.len();
    if let Some(&bad) = verdict.minimal_indices.iter().find(|&&i| i == 0 || i > len) {
        return Err(MetricError::InvalidIndices {
            indices: vec![bad],
            bank_len: len,
        });
    }
    if len == 0 {
        return Ok(None);
    }
    let agree = labels
        .iter()
        .enumerate()
        .filter(|(i, &label)| {
            let predicted_inefficient = !verdict.minimal_indices.contains(&(i + 1));
            predicted_inefficient == label
        })
        .count();
    Ok(Some(agree as f64 / len as f64))
}

/// Binary exact-count agreement: 1 when the number of predicted inefficient
/// entries equals the number of labeled ones, else 0.
pub fn acc_efficiency_mms(
    verdict: &MinimalEvidenceVerdict,
    labels: &[bool],
) -> Result<f64, MetricError> {
    let len = labels.len();
    if let Some(&bad) = verdict.minimal_indices.iter().find(|&&i| i == 0 || i > len) {
        return Err(MetricError::InvalidIndices {
            indices: vec![bad],
            bank_len: len,
        });
    }
    let predicted = len - verdict.minimal_indices.len();
    let labeled = labels.iter().filter(|&&l| l).count();
    Ok(if predicted == labeled { 1.0 } else { 0.0 })
}

/// Agreement over the failure set; absent when no tool call failed.
pub fn acc_adaptivity(
    verdicts: &[AdaptivityVerdict],
    labels: &BTreeMap<usize, bool>,
) -> Result<Option<f64>, MetricError> {
    if verdicts.len() != labels.len() {
        return Err(MetricError::ArityMismatch {
            what: "adaptivity",
            expected: labels.len(),
            got: verdicts.len(),
        });
    }
    let covered: BTreeSet<usize> = verdicts.iter().map(|v| v.failure_step).collect();
    if covered != labels.keys().copied().collect() {
        return Err(MetricError::ArityMismatch {
            what: "adaptivity",
            expected: labels.len(),
            got: covered.len(),
        });
    }
    if labels.is_empty() {
        return Ok(None);
    }
    let agree = verdicts
        .iter()
        .filter(|v| labels[&v.failure_step] == v.adaptive)
        .count();
    Ok(Some(agree as f64 / labels.len() as f64))
}

// ---------------------------------------------------------------------------
// Dataset runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetaRunOptions {
    pub workers: usize,
    pub patterns: FailurePatterns,
}

impl Default for MetaRunOptions {
    fn default() -> Self {
        MetaRunOptions {
            workers: 4,
            patterns: FailurePatterns::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub trajectory_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_hallucination: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_efficiency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_adaptivity: Option<f64>,
    pub judge_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    pub dialect: Dialect,
    pub mode: EvidenceMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_hallucination: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_efficiency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_adaptivity: Option<f64>,
    pub evaluated: usize,
    pub errored: usize,
    pub mean_judge_seconds_per_query: f64,
    pub per_trajectory: Vec<TrajectoryMeta>,
}

/// Judges every trajectory and scores verdict/label agreement. Results are
/// keyed and sorted by trajectory id, so concurrency never changes the
/// report; judge failures become per-trajectory error markers.
pub fn run_meta_eval(
    judge: &dyn Judge,
    dataset: &LabeledDataset,
    mode: EvidenceMode,
    opts: &MetaRunOptions,
) -> MetaReport {
    let mut rows = parallel_map(&dataset.trajectories, opts.workers, |t| {
        score_one(judge, t, dataset.dialect, mode, &opts.patterns)
    });
    rows.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));

    let scored: Vec<&TrajectoryMeta> = rows.iter().filter(|r| r.error.is_none()).collect();
    let errored = rows.len() - scored.len();
    let mean_of = |pick: fn(&TrajectoryMeta) -> Option<f64>| -> Option<f64> {
        let values: Vec<f64> = scored.iter().filter_map(|r| pick(r)).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let mean_judge_seconds_per_query = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|r| r.judge_seconds).sum::<f64>() / scored.len() as f64
    };

    MetaReport {
        dialect: dataset.dialect,
        mode,
        acc_hallucination: mean_of(|r| r.acc_hallucination),
        acc_efficiency: mean_of(|r| r.acc_efficiency),
        acc_adaptivity: mean_of(|r| r.acc_adaptivity),
        evaluated: scored.len(),
        errored,
        mean_judge_seconds_per_query,
        per_trajectory: rows,
    }
}

fn score_one(
    judge: &dyn Judge,
    t: &Trajectory,
    dialect: Dialect,
    mode: EvidenceMode,
    patterns: &FailurePatterns,
) -> TrajectoryMeta {
    let reasoning = dialect == Dialect::MetaGta;
    let error_row = |detail: String| TrajectoryMeta {
        trajectory_id: t.query.id.clone(),
        acc_hallucination: None,
        acc_efficiency: None,
        acc_adaptivity: None,
        judge_seconds: 0.0,
        error: Some(detail),
    };

    let set = match collect_verdicts(t, judge, mode, patterns, reasoning, reasoning) {
        Ok(set) => set,
        Err(e) => return error_row(e.to_string()),
    };

    let labels_h: Vec<bool> = t.steps.iter().map(|s| s.hallucination_label()).collect();
    let labels_i: Vec<bool> = t.tool_steps().iter().map(|s| s.inefficient_label()).collect();
    let labels_adp: BTreeMap<usize, bool> = set
        .failures
        .iter()
        .map(|&f| (f, t.steps[f].adaptive_label()))
        .collect();

    let scored = (|| -> Result<_, MetricError> {
        Ok(match dialect {
            Dialect::MetaGta => (
                Some(acc_hallucination(&set.grounding, &labels_h)?),
                acc_efficiency_gta(&set.min_evidence, &labels_i)?,
                acc_adaptivity(&set.adaptivity, &labels_adp)?,
            ),
            Dialect::MetaMms => (
                None,
                Some(acc_efficiency_mms(&set.min_evidence, &labels_i)?),
                None,
            ),
        })
    })();
    match scored {
        Ok((acc_h, acc_eff, acc_adp)) => TrajectoryMeta {
            trajectory_id: t.query.id.clone(),
            acc_hallucination: acc_h,
            acc_efficiency: acc_eff,
            acc_adaptivity: acc_adp,
            judge_seconds: set.judge_seconds,
            error: None,
        },
        Err(e) => error_row(e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

impl MetaReport {
    pub fn to_json_string(&self) -> Result<String, MetaError> {
        serde_json::to_string_pretty(self).map_err(|e| MetaError::Emit(e.to_string()))
    }

    /// Fixed-column CSV, one row per trajectory; absent values stay empty.
    pub fn to_csv_string(&self) -> Result<String, MetaError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer
            .write_record([
                "trajectory_id",
                "acc_hallucination",
                "acc_efficiency",
                "acc_adaptivity",
                "judge_seconds",
                "error",
            ])
            .map_err(|e| MetaError::Emit(e.to_string()))?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.per_trajectory {
            writer
                .write_record([
                    row.trajectory_id.clone(),
                    cell(row.acc_hallucination),
                    cell(row.acc_efficiency),
                    cell(row.acc_adaptivity),
                    row.judge_seconds.to_string(),
                    row.error.clone().unwrap_or_default(),
                ])
                .map_err(|e| MetaError::Emit(e.to_string()))?;
        }
        let bytes = writer.into_inner().map_err(|e| MetaError::Emit(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| MetaError::Emit(e.to_string()))
    }
}
