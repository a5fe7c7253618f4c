//! Dataset evaluation reports: per-trajectory score rows, aggregates, and
//! emission as JSON, CSV, and plot-ready tables.
//!
//! [`evaluate_dataset`] runs the judge over every trajectory and produces an
//! [`EvalReport`]: one row per trajectory plus one aggregate block. Judge
//! failures are recorded in their row and never stop the run. Reports
//! round-trip through both JSON and CSV with identical values, and multiple
//! reports merge into accuracy-versus-cost tables for plotting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedder;
use crate::evidence::EvidenceBank;
use crate::failure::FailurePatterns;
use crate::judge::{EvidenceMode, Judge};
use crate::meta_eval::collect_verdicts;
use crate::metrics::{
    accuracy_breakdown, adaptivity_score, answer_score, correct_from_score, efficiency_score,
    hallucination_score, instruction_errors, usage_stats, CharEstimator, MetricError, TypedScore,
    DEFAULT_CORRECT_THRESHOLD,
};
use crate::trajectory::{AnswerType, Trajectory};
use crate::worker::parallel_map;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no trajectories to evaluate")]
    Empty,
    #[error("report emission failed: {0}")]
    Emit(String),
    #[error("report parse failed: {0}")]
    Parse(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

// ---------------------------------------------------------------------------
// Report shape
// ---------------------------------------------------------------------------

/// One trajectory's scores. Efficiency is absent for incorrect answers,
/// adaptivity when no tool call failed, and all judge-derived fields when
/// the judge errored (the error text is kept in-row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub query_id: String,
    pub answer_type: AnswerType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptivity: Option<f64>,
    pub nonexistent_tool_ratio: f64,
    pub bad_arguments_ratio: f64,
    pub turns: u64,
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Dataset-level aggregates. Score means are macro (each trajectory
/// weighted equally) except overall accuracy, which is the micro-average
/// over all scored samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub accuracy_per_type: BTreeMap<AnswerType, f64>,
    /// Mean over correct trajectories only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_hallucination_reduction: Option<f64>,
    /// Mean over trajectories with at least one tool failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_adaptivity: Option<f64>,
    pub nonexistent_tool_ratio: f64,
    pub bad_arguments_ratio: f64,
    pub mean_turns: f64,
    pub mean_output_tokens: f64,
    pub evaluated: usize,
    pub errored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Alias of the agent under evaluation; report tables key on it.
    pub model: String,
    /// Emission timestamp, excluded from determinism comparisons; callers
    /// set it at write time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub seed: u64,
    pub mode: EvidenceMode,
    pub rows: Vec<ReportRow>,
    pub aggregate: Aggregate,
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub model: String,
    pub seed: u64,
    pub mode: EvidenceMode,
    pub patterns: FailurePatterns,
    pub workers: usize,
    /// Similarity threshold for counting an LTR/IMG answer as correct when
    /// gating efficiency.
    pub correct_threshold: f64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        EvaluateOptions {
            model: "unnamed-model".into(),
            seed: 0,
            mode: EvidenceMode::WithBank,
            patterns: FailurePatterns::default(),
            workers: 4,
            correct_threshold: DEFAULT_CORRECT_THRESHOLD,
        }
    }
}

/// Scores every trajectory and aggregates the results. Rows keep dataset
/// order; judge failures become error rows rather than run failures, so
/// the only hard error is an empty input.
pub fn evaluate_dataset(
    trajectories: &[Trajectory],
    judge: &dyn Judge,
    embedder: &dyn Embedder,
    opts: &EvaluateOptions,
) -> Result<EvalReport, ReportError> {
    if trajectories.is_empty() {
        return Err(ReportError::Empty);
    }
    let rows = parallel_map(trajectories, opts.workers, |t| {
        score_row(t, judge, embedder, opts)
    });
    let aggregate = aggregate_rows(&rows);
    Ok(EvalReport {
        model: opts.model.clone(),
        generated_at: None,
        seed: opts.seed,
        mode: opts.mode,
        rows,
        aggregate,
    })
}

fn score_row(
    t: &Trajectory,
    judge: &dyn Judge,
    embedder: &dyn Embedder,
    opts: &EvaluateOptions,
) -> ReportRow {
    let usage = usage_stats(t, &CharEstimator);
    let errors = instruction_errors(t);
    let mut row = ReportRow {
        query_id: t.query.id.clone(),
        answer_type: t.query.answer_type,
        accuracy: None,
        efficiency: None,
        hallucination_reduction: None,
        adaptivity: None,
        nonexistent_tool_ratio: errors.nonexistent_ratio(),
        bad_arguments_ratio: errors.bad_arguments_ratio(),
        turns: usage.turns,
        output_tokens: usage.output_tokens,
        error: None,
    };

    let accuracy = match answer_score(t, embedder, &opts.patterns) {
        Ok(score) => score,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.accuracy = Some(accuracy);
    let correct = correct_from_score(t.query.answer_type, accuracy, opts.correct_threshold);

    let verdicts = match collect_verdicts(t, judge, opts.mode, &opts.patterns, true, true) {
        Ok(v) => v,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    let bank = EvidenceBank::build(t);
    let scored: Result<(), MetricError> = (|| {
        row.efficiency = efficiency_score(&bank, &verdicts.min_evidence, correct)?;
        let h = hallucination_score(&verdicts.grounding, t.n())?;
        row.hallucination_reduction = Some(1.0 - h);
        row.adaptivity = adaptivity_score(&verdicts.adaptivity, &verdicts.failures)?;
        Ok(())
    })();
    if let Err(e) = scored {
        row.efficiency = None;
        row.hallucination_reduction = None;
        row.adaptivity = None;
        row.error = Some(e.to_string());
    }
    row
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

/// Folds rows into the aggregate block. Every mean ranges over the rows
/// where the field applies; instruction-error ratios and usage are means
/// over all rows.
pub fn aggregate_rows(rows: &[ReportRow]) -> Aggregate {
    let samples: Vec<TypedScore> = rows
        .iter()
        .filter_map(|r| {
            r.accuracy.map(|score| TypedScore { answer_type: r.answer_type, score })
        })
        .collect();
    let (overall_accuracy, accuracy_per_type) = match accuracy_breakdown(&samples) {
        Ok(acc) => (Some(acc.overall), acc.per_type),
        Err(_) => (None, BTreeMap::new()),
    };
    let count = rows.len().max(1) as f64;
    Aggregate {
        overall_accuracy,
        accuracy_per_type,
        mean_efficiency: mean_of(rows.iter().filter_map(|r| r.efficiency)),
        mean_hallucination_reduction: mean_of(
            rows.iter().filter_map(|r| r.hallucination_reduction),
        ),
        mean_adaptivity: mean_of(rows.iter().filter_map(|r| r.adaptivity)),
        nonexistent_tool_ratio: rows.iter().map(|r| r.nonexistent_tool_ratio).sum::<f64>() / count,
        bad_arguments_ratio: rows.iter().map(|r| r.bad_arguments_ratio).sum::<f64>() / count,
        mean_turns: rows.iter().map(|r| r.turns as f64).sum::<f64>() / count,
        mean_output_tokens: rows.iter().map(|r| r.output_tokens as f64).sum::<f64>() / count,
        evaluated: rows.iter().filter(|r| r.error.is_none()).count(),
        errored: rows.iter().filter(|r| r.error.is_some()).count(),
    }
}

// ---------------------------------------------------------------------------
// JSON and CSV emission
// ---------------------------------------------------------------------------

impl EvalReport {
    pub fn to_json_string(&self) -> Result<String, ReportError> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| ReportError::Emit(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self, ReportError> {
        let mut deserializer = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut deserializer)
            .map_err(|e| ReportError::Parse(e.to_string()))
    }
}

const ROW_COLUMNS: [&str; 11] = [
    "query_id",
    "answer_type",
    "accuracy",
    "efficiency",
    "hallucination_reduction",
    "adaptivity",
    "nonexistent_tool_ratio",
    "bad_arguments_ratio",
    "turns",
    "output_tokens",
    "error",
];

const AGGREGATE_COLUMNS: [&str; 13] = [
    "overall_accuracy",
    "accuracy_mcq",
    "accuracy_ltr",
    "accuracy_img",
    "mean_efficiency",
    "mean_hallucination_reduction",
    "mean_adaptivity",
    "nonexistent_tool_ratio",
    "bad_arguments_ratio",
    "mean_turns",
    "mean_output_tokens",
    "evaluated",
    "errored",
];

fn answer_type_cell(ty: AnswerType) -> &'static str {
    match ty {
        AnswerType::Mcq => "MCQ",
        AnswerType::Ltr => "LTR",
        AnswerType::Img => "IMG",
    }
}

fn parse_answer_type(cell: &str) -> Result<AnswerType, ReportError> {
    match cell {
        "MCQ" => Ok(AnswerType::Mcq),
        "LTR" => Ok(AnswerType::Ltr),
        "IMG" => Ok(AnswerType::Img),
        other => Err(ReportError::Parse(format!("unknown answer type '{other}'"))),
    }
}

fn float_cell(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_float_cell(cell: &str, column: &str) -> Result<Option<f64>, ReportError> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| ReportError::Parse(format!("column {column}: bad number '{cell}'")))
}

fn require_float(cell: &str, column: &str) -> Result<f64, ReportError> {
    parse_float_cell(cell, column)?
        .ok_or_else(|| ReportError::Parse(format!("column {column}: empty cell")))
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = writer
        .into_inner()
        .map_err(|e| ReportError::Emit(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| ReportError::Emit(e.to_string()))
}

fn check_header(record: &csv::StringRecord, expected: &[&str]) -> Result<(), ReportError> {
    let got: Vec<&str> = record.iter().collect();
    if got != expected {
        return Err(ReportError::Parse(format!(
            "unexpected CSV header: {}",
            got.join(",")
        )));
    }
    Ok(())
}

/// Per-trajectory rows as CSV; absent values become empty cells. Numbers
/// use the shortest round-trip form so CSV and JSON carry identical
/// values.
pub fn rows_to_csv_string(rows: &[ReportRow]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(ROW_COLUMNS)
        .map_err(|e| ReportError::Emit(e.to_string()))?;
    for row in rows {
        writer
            .write_record(&[
                row.query_id.clone(),
                answer_type_cell(row.answer_type).to_string(),
                float_cell(row.accuracy),
                float_cell(row.efficiency),
                float_cell(row.hallucination_reduction),
                float_cell(row.adaptivity),
                row.nonexistent_tool_ratio.to_string(),
                row.bad_arguments_ratio.to_string(),
                row.turns.to_string(),
                row.output_tokens.to_string(),
                row.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| ReportError::Emit(e.to_string()))?;
    }
    finish_csv(writer)
}

pub fn rows_from_csv_string(text: &str) -> Result<Vec<ReportRow>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ReportError::Parse(e.to_string()))?
        .clone();
    check_header(&headers, &ROW_COLUMNS)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| ReportError::Parse(e.to_string()))?;
        let cell = |i: usize| record.get(i).unwrap_or_default();
        let parse_count = |i: usize| -> Result<u64, ReportError> {
            cell(i).parse().map_err(|_| {
                ReportError::Parse(format!("column {}: bad count '{}'", ROW_COLUMNS[i], cell(i)))
            })
        };
        rows.push(ReportRow {
            query_id: cell(0).to_string(),
            answer_type: parse_answer_type(cell(1))?,
            accuracy: parse_float_cell(cell(2), "accuracy")?,
            efficiency: parse_float_cell(cell(3), "efficiency")?,
            hallucination_reduction: parse_float_cell(cell(4), "hallucination_reduction")?,
            adaptivity: parse_float_cell(cell(5), "adaptivity")?,
            nonexistent_tool_ratio: require_float(cell(6), "nonexistent_tool_ratio")?,
            bad_arguments_ratio: require_float(cell(7), "bad_arguments_ratio")?,
            turns: parse_count(8)?,
            output_tokens: parse_count(9)?,
            error: (!cell(10).is_empty()).then(|| cell(10).to_string()),
        });
    }
    Ok(rows)
}

/// The aggregate block as a one-row CSV with fixed columns.
pub fn aggregate_to_csv_string(aggregate: &Aggregate) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(AGGREGATE_COLUMNS)
        .map_err(|e| ReportError::Emit(e.to_string()))?;
    let per_type = |ty: AnswerType| float_cell(aggregate.accuracy_per_type.get(&ty).copied());
    writer
        .write_record(&[
            float_cell(aggregate.overall_accuracy),
            per_type(AnswerType::Mcq),
            per_type(AnswerType::Ltr),
            per_type(AnswerType::Img),
            float_cell(aggregate.mean_efficiency),
            float_cell(aggregate.mean_hallucination_reduction),
            float_cell(aggregate.mean_adaptivity),
            aggregate.nonexistent_tool_ratio.to_string(),
            aggregate.bad_arguments_ratio.to_string(),
            aggregate.mean_turns.to_string(),
            aggregate.mean_output_tokens.to_string(),
            aggregate.evaluated.to_string(),
            aggregate.errored.to_string(),
        ])
        .map_err(|e| ReportError::Emit(e.to_string()))?;
    finish_csv(writer)
}

pub fn aggregate_from_csv_string(text: &str) -> Result<Aggregate, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ReportError::Parse(e.to_string()))?
        .clone();
    check_header(&headers, &AGGREGATE_COLUMNS)?;
    let record = reader
        .records()
        .next()
        .ok_or_else(|| ReportError::Parse("aggregate CSV has no data row".into()))?
        .map_err(|e| ReportError::Parse(e.to_string()))?;
    let cell = |i: usize| record.get(i).unwrap_or_default();
    let parse_count = |i: usize| -> Result<usize, ReportError> {
        cell(i).parse().map_err(|_| {
            ReportError::Parse(format!(
                "column {}: bad count '{}'",
                AGGREGATE_COLUMNS[i],
                cell(i)
            ))
        })
    };
    let mut accuracy_per_type = BTreeMap::new();
    for (i, ty) in [(1, AnswerType::Mcq), (2, AnswerType::Ltr), (3, AnswerType::Img)] {
        if let Some(value) = parse_float_cell(cell(i), AGGREGATE_COLUMNS[i])? {
            accuracy_per_type.insert(ty, value);
        }
    }
    Ok(Aggregate {
        overall_accuracy: parse_float_cell(cell(0), "overall_accuracy")?,
        accuracy_per_type,
        mean_efficiency: parse_float_cell(cell(4), "mean_efficiency")?,
        mean_hallucination_reduction: parse_float_cell(cell(5), "mean_hallucination_reduction")?,
        mean_adaptivity: parse_float_cell(cell(6), "mean_adaptivity")?,
        nonexistent_tool_ratio: require_float(cell(7), "nonexistent_tool_ratio")?,
        bad_arguments_ratio: require_float(cell(8), "bad_arguments_ratio")?,
        mean_turns: require_float(cell(9), "mean_turns")?,
        mean_output_tokens: require_float(cell(10), "mean_output_tokens")?,
        evaluated: parse_count(11)?,
        errored: parse_count(12)?,
    })
}

// ---------------------------------------------------------------------------
// Cross-report tables
// ---------------------------------------------------------------------------

/// One model's point in the accuracy-versus-cost tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub model: String,
    pub overall_accuracy: f64,
    pub mean_turns: f64,
    pub mean_output_tokens: f64,
}

/// Merges reports into plot rows sorted by overall accuracy, best first
/// (ties broken by model name). Reports without a single scored answer
/// have no accuracy point and are skipped.
pub fn plot_rows(reports: &[EvalReport]) -> Vec<PlotRow> {
    let mut rows: Vec<PlotRow> = reports
        .iter()
        .filter_map(|r| {
            r.aggregate.overall_accuracy.map(|overall_accuracy| PlotRow {
                model: r.model.clone(),
                overall_accuracy,
                mean_turns: r.aggregate.mean_turns,
                mean_output_tokens: r.aggregate.mean_output_tokens,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        b.overall_accuracy
            .total_cmp(&a.overall_accuracy)
            .then_with(|| a.model.cmp(&b.model))
    });
    rows
}

/// Plot rows as CSV, ready for a tokens-versus-accuracy or
/// turns-versus-accuracy scatter.
pub fn plot_csv(rows: &[PlotRow]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["model", "overall_accuracy", "mean_turns", "mean_output_tokens"])
        .map_err(|e| ReportError::Emit(e.to_string()))?;
    for row in rows {
        writer
            .write_record(&[
                row.model.clone(),
                row.overall_accuracy.to_string(),
                row.mean_turns.to_string(),
                row.mean_output_tokens.to_string(),
            ])
            .map_err(|e| ReportError::Emit(e.to_string()))?;
    }
    finish_csv(writer)
}

/// Fixed-width text table of per-model aggregates, in plot-row order;
/// reports without an accuracy point close the table. Every line is
/// padded to the same length.
pub fn aggregate_table(reports: &[EvalReport]) -> String {
    let mut ordered: Vec<&EvalReport> = reports.iter().collect();
    ordered.sort_by(|a, b| {
        let key = |r: &EvalReport| r.aggregate.overall_accuracy.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.model.cmp(&b.model))
    });
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let mut table: Vec<Vec<String>> = vec![vec![
        "model".into(),
        "overall".into(),
        "efficiency".into(),
        "halluc_reduction".into(),
        "adaptivity".into(),
        "mean_turns".into(),
        "mean_tokens".into(),
        "evaluated".into(),
        "errored".into(),
    ]];
    for report in ordered {
        let a = &report.aggregate;
        table.push(vec![
            report.model.clone(),
            fmt(a.overall_accuracy),
            fmt(a.mean_efficiency),
            fmt(a.mean_hallucination_reduction),
            fmt(a.mean_adaptivity),
            format!("{:.2}", a.mean_turns),
            format!("{:.1}", a.mean_output_tokens),
            a.evaluated.to_string(),
            a.errored.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|col| table.iter().map(|row| row[col].len()).max().unwrap_or(0))
        .collect();
    table
        .iter()
        .map(|row| {
            row.iter()
                .zip(&widths)
                .map(|(cell, width)| format!("{cell:<width$}"))
                .collect::<Vec<_>>()
                .join("  ")
        })
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
