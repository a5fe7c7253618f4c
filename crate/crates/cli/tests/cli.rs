//! End-to-end tests running the `trajeval` binary: exit codes, config
//! layering, and file outputs for every subcommand.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

use trajeval_core::meta_eval::DatasetManifest;
use trajeval_core::report::{
    aggregate_from_csv_string, rows_from_csv_string, Aggregate, EvalReport,
};
use trajeval_core::trajectory::{
    validate_structure, write_ndjson, AnswerType, ParamSpec, Query, RunMeta, Step, StepLabels,
    Termination, ToolDef, Trajectory, FINAL_ANSWER_ACTION,
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_trajeval"));
    // Isolate from ambient TRAJEVAL_* configuration.
    cmd.env_clear();
    cmd
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(cmd: &mut Command, expected: i32) -> Output {
    let out = cmd.output().expect("binary runs");
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("stderr line is JSON")
}

fn tool(name: &str, description: &str, param: &str) -> ToolDef {
    ToolDef {
        name: name.into(),
        description: description.into(),
        parameters: BTreeMap::from([(
            param.to_string(),
            ParamSpec { param_type: "string".into(), required: true },
        )]),
        available: true,
    }
}

fn step(thought: &str, action: &str, input: Value, observation: &str) -> Step {
    Step {
        thought: thought.into(),
        action: action.into(),
        action_input: input,
        observation: Some(observation.into()),
        labels: None,
    }
}

fn terminal(answer: &str) -> Step {
    Step {
        thought: "I now know the final answer.".into(),
        action: FINAL_ANSWER_ACTION.into(),
        action_input: Value::String(answer.into()),
        observation: None,
        labels: None,
    }
}

fn with_labels(mut s: Step, f: impl FnOnce(&mut StepLabels)) -> Step {
    let mut labels = StepLabels::default();
    f(&mut labels);
    s.labels = Some(labels);
    s
}

fn trajectory(id: &str, steps: Vec<Step>, answer: &str) -> Trajectory {
    let turns = (steps.len() - 1) as u64;
    Trajectory {
        query: Query {
            id: id.into(),
            text: format!("Demo query {id}"),
            files: Vec::new(),
            answer_type: AnswerType::Ltr,
            gold: Some(answer.into()),
        },
        toolset: vec![
            tool("OCR", "Reads text from an image.", "image"),
            tool("Calculator", "Evaluates an arithmetic expression.", "expr"),
            ToolDef { available: false, ..tool("FastOCR", "Reads text from an image.", "image") },
        ],
        steps,
        final_answer: answer.into(),
        meta: RunMeta { turns, output_tokens: Some(64), terminated_by: Termination::Answer },
    }
}

/// Three labeled trajectories: one with an inefficient duplicate and a
/// hallucination, one with an adaptive recovery, one non-adaptive.
fn labeled_dataset() -> Vec<Trajectory> {
    let a = trajectory(
        "gta-a",
        vec![
            step(
                "I will read the menu image.",
                "OCR",
                json!({"image": "menu.jpg"}),
                "text: salmon 18 dollars",
            ),
            with_labels(
                step(
                    "I will read the menu image again.",
                    "OCR",
                    json!({"image": "menu.jpg"}),
                    "text: salmon 18 dollars",
                ),
                |l| l.inefficient = Some(true),
            ),
            with_labels(
                step(
                    "The menu also lists a 4 dollar tip surcharge.",
                    "Calculator",
                    json!({"expr": "18+0"}),
                    "18",
                ),
                |l| l.hallucination = Some(true),
            ),
            terminal("18"),
        ],
        "18",
    );
    let b = trajectory(
        "gta-b",
        vec![
            step(
                "I will try the fast reader.",
                "FastOCR",
                json!({"image": "menu.jpg"}),
                "Error: unavailable tool 'FastOCR'",
            ),
            with_labels(
                step(
                    "The fast reader is unavailable; I fall back to OCR.",
                    "OCR",
                    json!({"image": "menu.jpg"}),
                    "text: salmon 18 dollars",
                ),
                |l| l.adaptive = Some(true),
            ),
            terminal("18"),
        ],
        "18",
    );
    let mut c = trajectory(
        "gta-c",
        vec![
            step(
                "I will try the fast reader.",
                "FastOCR",
                json!({"image": "menu.jpg"}),
                "Error: unavailable tool 'FastOCR'",
            ),
            with_labels(
                step(
                    "The menu is already clear; I total it up.",
                    "Calculator",
                    json!({"expr": "0+0"}),
                    "0",
                ),
                |l| l.adaptive = Some(false),
            ),
            terminal("zero"),
        ],
        "zero",
    );
    // Wrong answer: the gold shares no tokens with what was returned.
    c.query.gold = Some("18".into());
    vec![a, b, c]
}

/// A clean (unlabeled) trajectory suitable for augmentation; its toolset
/// carries no fakes, leaving the names free for injection.
fn clean_dataset() -> Vec<Trajectory> {
    let mut t = trajectory(
        "clean-1",
        vec![
            step(
                "I will read the menu image.",
                "OCR",
                json!({"image": "menu.jpg"}),
                "text: salmon 18 dollars, pasta 12 dollars",
            ),
            step(
                "I will add the two prices.",
                "Calculator",
                json!({"expr": "18+12"}),
                "30",
            ),
            terminal("30"),
        ],
        "30",
    );
    t.toolset.retain(|d| d.available);
    vec![t]
}

fn read_report(dir: &Path) -> EvalReport {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report.json exists");
    EvalReport::from_json_str(&text).expect("report.json parses")
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[test]
fn evaluate_writes_matching_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();
    let out_dir = dir.path().join("out");

    run_ok(
        bin()
            .args(["evaluate", "--judge", "label_oracle", "--model", "demo", "--seed", "9"])
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_dir),
    );

    let report = read_report(&out_dir);
    assert_eq!(report.model, "demo");
    assert_eq!(report.seed, 9);
    assert!(report.generated_at.is_some());
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.aggregate.errored, 0);

    // CSV forms carry exactly the JSON values.
    let rows_csv = std::fs::read_to_string(out_dir.join("report_rows.csv")).unwrap();
    assert_eq!(rows_from_csv_string(&rows_csv).unwrap(), report.rows);
    let agg_csv = std::fs::read_to_string(out_dir.join("report_aggregate.csv")).unwrap();
    assert_eq!(aggregate_from_csv_string(&agg_csv).unwrap(), report.aggregate);
}

#[test]
fn evaluate_is_deterministic_modulo_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();

    let mut reports = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        run_ok(
            bin()
                .args(["evaluate", "--judge", "label_oracle", "--seed", "5"])
                .arg("--input")
                .arg(&input)
                .arg("--out-dir")
                .arg(&out_dir),
        );
        let mut report = read_report(&out_dir);
        report.generated_at = None;
        reports.push(report.to_json_string().unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn empty_input_exits_3_with_no_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.ndjson");
    std::fs::write(&input, "").unwrap();

    let out = run_code(
        bin()
            .args(["evaluate"])
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(dir.path().join("out")),
        3,
    );
    let err = stderr_error(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert!(err["error"]["detail"].as_str().unwrap().contains("no trajectories"));
}

#[test]
fn judge_failures_trip_the_threshold_exit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();
    // The script's labels cover a different dataset, so every verdict
    // request hits a script gap.
    write_ndjson(&dir.path().join("other.ndjson"), &clean_dataset()).unwrap();
    let script = dir.path().join("judge.json");
    std::fs::write(
        &script,
        serde_json::to_string_pretty(&json!({
            "grounding": {"rule": "label_oracle"},
            "min_evidence": {"rule": "label_oracle"},
            "adaptivity": {"rule": "label_oracle"},
            "labels_from": "other.ndjson"
        }))
        .unwrap(),
    )
    .unwrap();

    let out_dir = dir.path().join("out");
    let out = run_code(
        bin()
            .args(["evaluate", "--judge", "script"])
            .arg("--judge-script")
            .arg(&script)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_dir),
        4,
    );
    assert_eq!(stderr_error(&out)["error"]["kind"], "partial_failure");
    // The report was still written, with every row errored.
    let report = read_report(&out_dir);
    assert_eq!(report.aggregate.errored, 3);

    // Raising the tolerance turns the same run into a success.
    run_ok(
        bin()
            .args(["evaluate", "--judge", "script", "--max-failure-ratio", "1.0"])
            .arg("--judge-script")
            .arg(&script)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(dir.path().join("out2")),
    );
}

// ---------------------------------------------------------------------------
// configuration layering
// ---------------------------------------------------------------------------

#[test]
fn config_file_env_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();
    let config = dir.path().join("trajeval.toml");
    std::fs::write(&config, "seed = 1\nmodel = \"file-model\"\n").unwrap();

    // File only.
    let out_a = dir.path().join("a");
    run_ok(
        bin()
            .args(["evaluate"])
            .arg("--config")
            .arg(&config)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_a),
    );
    let report = read_report(&out_a);
    assert_eq!((report.seed, report.model.as_str()), (1, "file-model"));

    // Environment overrides the file.
    let out_b = dir.path().join("b");
    run_ok(
        bin()
            .env("TRAJEVAL_SEED", "2")
            .args(["evaluate"])
            .arg("--config")
            .arg(&config)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_b),
    );
    assert_eq!(read_report(&out_b).seed, 2);

    // Flags override both; the file still supplies what they don't.
    let out_c = dir.path().join("c");
    run_ok(
        bin()
            .env("TRAJEVAL_SEED", "2")
            .args(["evaluate", "--seed", "3"])
            .arg("--config")
            .arg(&config)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_c),
    );
    let report = read_report(&out_c);
    assert_eq!((report.seed, report.model.as_str()), (3, "file-model"));
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("trajeval.toml");
    std::fs::write(&config, "sed = 7\n").unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();

    let out = run_code(
        bin()
            .args(["evaluate"])
            .arg("--config")
            .arg(&config)
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(dir.path().join("out")),
        2,
    );
    assert_eq!(stderr_error(&out)["error"]["kind"], "config");
}

// ---------------------------------------------------------------------------
// meta-eval and augment
// ---------------------------------------------------------------------------

#[test]
fn meta_eval_oracle_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("labeled.ndjson");
    write_ndjson(&input, &labeled_dataset()).unwrap();
    let out_dir = dir.path().join("out");

    run_ok(
        bin()
            .args(["meta-eval", "--judge", "label_oracle", "--dialect", "meta_gta"])
            .arg("--input")
            .arg(&input)
            .arg("--out-dir")
            .arg(&out_dir),
    );
    let text = std::fs::read_to_string(out_dir.join("meta_report.json")).unwrap();
    let report: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["acc_hallucination"], 1.0);
    assert_eq!(report["acc_efficiency"], 1.0);
    assert_eq!(report["acc_adaptivity"], 1.0);
    assert!(out_dir.join("meta_report.csv").exists());
}

#[test]
fn augment_emits_valid_dataset_with_manifest_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("clean.ndjson");
    write_ndjson(&input, &clean_dataset()).unwrap();
    let out = dir.path().join("meta.ndjson");

    run_ok(
        bin()
            .args(["augment", "--seed", "7"])
            .arg("--input")
            .arg(&input)
            .arg("--out")
            .arg(&out),
    );

    let produced = trajeval_core::trajectory::read_ndjson(&out).unwrap();
    assert!(!produced.is_empty());
    for t in &produced {
        assert!(validate_structure(t).is_empty(), "{} is invalid", t.id());
    }
    let manifest = DatasetManifest::load(&dir.path().join("meta.manifest.json")).unwrap();
    assert_eq!(manifest.total, produced.len());

    // The augmented dataset is immediately consumable by meta-eval.
    run_ok(
        bin()
            .args(["meta-eval", "--judge", "label_oracle"])
            .arg("--input")
            .arg(&out)
            .arg("--out-dir")
            .arg(dir.path().join("meta_out")),
    );
}

// ---------------------------------------------------------------------------
// run and report
// ---------------------------------------------------------------------------

#[test]
fn run_scripted_episodes_and_evaluate_them() {
    let dir = tempfile::tempdir().unwrap();
    let queries = dir.path().join("queries.json");
    std::fs::write(
        &queries,
        serde_json::to_string_pretty(&json!([
            {"id": "q1", "text": "What is 2+3?", "answer_type": "LTR", "gold": "5"},
            {"id": "q2", "text": "What is 10/4?", "answer_type": "LTR", "gold": "2.5"}
        ]))
        .unwrap(),
    )
    .unwrap();
    let tools = dir.path().join("tools.json");
    std::fs::write(
        &tools,
        serde_json::to_string_pretty(&json!({
            "tools": [
                {
                    "name": "Calculator",
                    "description": "Evaluates an arithmetic expression.",
                    "parameters": {"expr": {"type": "string", "required": true}},
                    "kind": "calculator"
                },
                {
                    "name": "FastCalculator",
                    "description": "Evaluates an arithmetic expression.",
                    "parameters": {"expr": {"type": "string", "required": true}},
                    "available": false
                }
            ]
        }))
        .unwrap(),
    )
    .unwrap();
    let script = dir.path().join("script.json");
    std::fs::write(
        &script,
        serde_json::to_string_pretty(&json!({
            "q1": [
                "Thought: compute\nAction: Calculator\nAction Input: {\"expr\": \"2+3\"}",
                "Thought: done\nFinal Answer: 5"
            ],
            "q2": [
                "Thought: compute\nAction: Calculator\nAction Input: {\"expr\": \"10/4\"}",
                "Thought: done\nFinal Answer: 2.5"
            ]
        }))
        .unwrap(),
    )
    .unwrap();

    let out = dir.path().join("episodes.ndjson");
    run_ok(
        bin()
            .args(["run"])
            .arg("--queries")
            .arg(&queries)
            .arg("--tools")
            .arg(&tools)
            .arg("--script")
            .arg(&script)
            .arg("--out")
            .arg(&out),
    );
    let episodes = trajeval_core::trajectory::read_ndjson(&out).unwrap();
    assert_eq!(episodes.len(), 2);
    assert!(episodes
        .iter()
        .all(|t| t.meta.terminated_by == Termination::Answer));
    assert_eq!(episodes[0].final_answer, "5");

    // The recorded episodes feed straight into evaluate.
    run_ok(
        bin()
            .args(["evaluate", "--judge", "label_oracle"])
            .arg("--input")
            .arg(&out)
            .arg("--out-dir")
            .arg(dir.path().join("eval")),
    );
    let report = read_report(&dir.path().join("eval"));
    assert_eq!(report.aggregate.overall_accuracy, Some(1.0));
}

#[test]
fn report_merges_and_sorts_by_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (model, accuracy) in [("weak", 0.3), ("strong", 0.9)] {
        let report = EvalReport {
            model: model.into(),
            generated_at: None,
            seed: 0,
            mode: trajeval_core::judge::EvidenceMode::WithBank,
            rows: Vec::new(),
            aggregate: Aggregate {
                overall_accuracy: Some(accuracy),
                accuracy_per_type: BTreeMap::new(),
                mean_efficiency: None,
                mean_hallucination_reduction: None,
                mean_adaptivity: None,
                nonexistent_tool_ratio: 0.0,
                bad_arguments_ratio: 0.0,
                mean_turns: 2.0,
                mean_output_tokens: 100.0,
                evaluated: 4,
                errored: 0,
            },
        };
        let path = dir.path().join(format!("{model}.json"));
        std::fs::write(&path, report.to_json_string().unwrap()).unwrap();
        paths.push(path);
    }

    let out_dir = dir.path().join("out");
    let mut cmd = bin();
    cmd.arg("report");
    for p in &paths {
        cmd.arg(p);
    }
    let out = run_ok(cmd.arg("--out-dir").arg(&out_dir));

    let csv = std::fs::read_to_string(out_dir.join("plot.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,overall_accuracy,mean_turns,mean_output_tokens");
    assert!(lines[1].starts_with("strong,0.9"));
    assert!(lines[2].starts_with("weak,0.3"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("strong"));
    assert!(out_dir.join("aggregates.txt").exists());

    // A malformed report file is an input error.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"model\": 3}").unwrap();
    let fail = run_code(
        bin().arg("report").arg(&bad).arg("--out-dir").arg(dir.path().join("out2")),
        3,
    );
    assert_eq!(stderr_error(&fail)["error"]["kind"], "input");
}

// ---------------------------------------------------------------------------
// fixture sanity
// ---------------------------------------------------------------------------

#[test]
fn helper_datasets_are_structurally_valid() {
    for t in labeled_dataset().iter().chain(clean_dataset().iter()) {
        let violations = validate_structure(t);
        assert!(violations.is_empty(), "{}: {:?}", t.id(), violations);
    }
}
