//! Acceptance gate: nine offline checks covering the scoring formulas,
//! oracle closure on the shipped labeled fixtures, dialect scoring rules,
//! harness feedback behavior, fake-tool wiring, dataset round-trips, and
//! end-to-end determinism. Each test prints one `criterion N: PASS` or
//! `criterion N: FAIL` line.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use trajeval_core::augment::{
    augment_dataset, enumerate_valid_orders, infer_dependencies, make_fake_toolset,
    AugmentOptions, FakeToolMap, FakeToolPair, TemplateGenerator,
};
use trajeval_core::client::{ChatClient, ChatClientConfig, ChatMessage, ClientError, RetryPolicy};
use trajeval_core::embedding::BagOfTokensEmbedder;
use trajeval_core::evidence::EvidenceBank;
use trajeval_core::failure::{FailurePatterns, DEFAULT_FAILURE_SUBSTRINGS};
use trajeval_core::harness::{
    run_episode, Calculator, EpisodePrompts, RunConfig, ScriptedAgent, ToolRegistry,
};
use trajeval_core::judge::{
    AdaptivityRule, AdaptivityVerdict, EvidenceMode, GroundingRule, GroundingVerdict, LabelIndex,
    MinEvidenceRule, MinimalEvidenceVerdict, ScriptedJudge,
};
use trajeval_core::meta_eval::{
    collect_verdicts, load_labeled_dataset, manifest_sidecar_path, run_meta_eval, DatasetManifest,
    Dialect, LabeledDataset, MetaRunOptions,
};
use trajeval_core::metrics::{
    adaptivity_score, answer_correct, efficiency_score, hallucination_score, instruction_errors,
    DEFAULT_CORRECT_THRESHOLD,
};
use trajeval_core::report::{aggregate_rows, ReportRow};
use trajeval_core::trajectory::{
    parse_trajectory, read_ndjson, serialize_trajectory, validate_structure, AnswerType,
    ParamSpec, Query, RunMeta, Step, StepLabels, Termination, ToolDef, Trajectory,
    TrajectoryFormat, FINAL_ANSWER_ACTION,
};

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

/// Runs one criterion body, printing its pass/fail line before propagating
/// any assertion failure to the test harness.
fn criterion(n: usize, body: impl FnOnce()) {
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("criterion {n}: PASS"),
        Err(cause) => {
            println!("criterion {n}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
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

fn terminal(thought: &str, answer: &str) -> Step {
    Step {
        thought: thought.into(),
        action: FINAL_ANSWER_ACTION.into(),
        action_input: Value::String(answer.into()),
        observation: None,
        labels: None,
    }
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
            tool("Calculator", "Evaluates an arithmetic expression.", "expression"),
        ],
        steps,
        final_answer: answer.into(),
        meta: RunMeta { turns, output_tokens: None, terminated_by: Termination::Answer },
    }
}

// ---------------------------------------------------------------------------
// 1. Formula suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_formula_suite() {
    criterion(1, || {
        let started = Instant::now();

        // Efficiency: |E_min| = 3 of |E_n| = 5.
        let steps: Vec<Step> = (1..=5)
            .map(|i| step("looked", "OCR", json!({"image": format!("{i}.png")}), "text"))
            .chain([terminal("done", "ok")])
            .collect();
        let t = trajectory("formulas", steps, "ok");
        let bank = EvidenceBank::build(&t);
        assert_eq!(bank.len(), 5);
        let verdict = MinimalEvidenceVerdict {
            minimal_indices: BTreeSet::from([1, 2, 3]),
            rationale: None,
        };
        assert_eq!(efficiency_score(&bank, &verdict, true).unwrap(), Some(0.6));

        // Hallucination rate: 1 ungrounded thought of 4.
        let grounding: Vec<GroundingVerdict> = (1..=4)
            .map(|i| GroundingVerdict { step: i, grounded: i != 2, rationale: None })
            .collect();
        assert_eq!(hallucination_score(&grounding, 4).unwrap(), 0.25);

        // Adaptivity over F = {1, 3} with one adaptive continuation.
        let failures = BTreeSet::from([1, 3]);
        let verdicts = [
            AdaptivityVerdict { failure_step: 1, adaptive: false },
            AdaptivityVerdict { failure_step: 3, adaptive: true },
        ];
        assert_eq!(adaptivity_score(&verdicts, &failures).unwrap(), Some(0.5));

        assert!(started.elapsed() < Duration::from_secs(1), "formula suite exceeded 1s");
    });
}

// ---------------------------------------------------------------------------
// 2. Oracle closure on the labeled mini dataset
// ---------------------------------------------------------------------------

/// What the flipped judge must score on one trajectory, derived by counting
/// labels directly rather than through the verdict pipeline.
fn flipped_expectation(t: &Trajectory) -> (Option<f64>, Option<f64>, Option<f64>) {
    let n = t.steps.len();
    let mut agree_h = 0usize;
    for s in &t.steps {
        let label = s.hallucination_label();
        // Empty thoughts are trivially grounded and never reach the judge;
        // every other prediction is the label's negation.
        let predicted = if s.thought.is_empty() { false } else { !label };
        if predicted == label {
            agree_h += 1;
        }
    }
    let acc_h = Some(agree_h as f64 / n as f64);

    let m = t.tool_steps().len();
    let acc_eff = if m == 0 {
        None
    } else {
        let agree = t
            .tool_steps()
            .iter()
            .filter(|s| !s.inefficient_label() == s.inefficient_label())
            .count();
        Some(agree as f64 / m as f64)
    };

    let failures: Vec<usize> = t
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.observation.as_deref().map_or(false, |o| {
                let lowered = o.to_lowercase();
                DEFAULT_FAILURE_SUBSTRINGS.iter().any(|sub| lowered.contains(sub))
            })
        })
        .map(|(i, _)| i + 1)
        .collect();
    let acc_adp = if failures.is_empty() {
        None
    } else {
        let agree = failures
            .iter()
            .filter(|&&f| {
                let label = t.steps[f].adaptive_label();
                !label == label
            })
            .count();
        Some(agree as f64 / failures.len() as f64)
    };

    (acc_h, acc_eff, acc_adp)
}

#[test]
fn criterion_2_oracle_closure() {
    criterion(2, || {
        let started = Instant::now();
        let dataset = load_labeled_dataset(&fixture("meta_gta_mini.ndjson"), None).unwrap();
        assert_eq!(dataset.dialect, Dialect::MetaGta);
        assert!(dataset.trajectories.len() >= 10, "mini dataset too small");

        // All three label kinds must occur.
        let mut inefficient = 0;
        let mut hallucinated = 0;
        let mut adaptivity_labels = 0;
        for t in &dataset.trajectories {
            for s in &t.steps {
                let labels = s.labels.unwrap_or_default();
                inefficient += usize::from(labels.inefficient == Some(true));
                hallucinated += usize::from(labels.hallucination == Some(true));
                adaptivity_labels += usize::from(labels.adaptive.is_some());
            }
        }
        assert!(inefficient > 0 && hallucinated > 0 && adaptivity_labels > 0);

        let opts = MetaRunOptions::default();
        let oracle = ScriptedJudge::label_oracle(&dataset.trajectories);
        let report = run_meta_eval(&oracle, &dataset, EvidenceMode::WithBank, &opts);
        assert_eq!(report.acc_hallucination, Some(1.0));
        assert_eq!(report.acc_efficiency, Some(1.0));
        assert_eq!(report.acc_adaptivity, Some(1.0));
        assert_eq!(report.evaluated, dataset.trajectories.len());
        assert_eq!(report.errored, 0);

        // The flipped judge must land exactly on the independently counted
        // complements, trajectory by trajectory.
        let flipped = ScriptedJudge::flipped_oracle(&dataset.trajectories);
        let flipped_report = run_meta_eval(&flipped, &dataset, EvidenceMode::WithBank, &opts);
        let expected: BTreeMap<&str, (Option<f64>, Option<f64>, Option<f64>)> = dataset
            .trajectories
            .iter()
            .map(|t| (t.id(), flipped_expectation(t)))
            .collect();
        let mut sums = (0.0, 0.0, 0.0);
        let mut counts = (0usize, 0usize, 0usize);
        for row in &flipped_report.per_trajectory {
            assert_eq!(row.error, None);
            let (h, eff, adp) = expected[row.trajectory_id.as_str()];
            assert_eq!(row.acc_hallucination, h, "{}", row.trajectory_id);
            assert_eq!(row.acc_efficiency, eff, "{}", row.trajectory_id);
            assert_eq!(row.acc_adaptivity, adp, "{}", row.trajectory_id);
            if let Some(v) = h {
                sums.0 += v;
                counts.0 += 1;
            }
            if let Some(v) = eff {
                sums.1 += v;
                counts.1 += 1;
            }
            if let Some(v) = adp {
                sums.2 += v;
                counts.2 += 1;
            }
        }
        assert_eq!(flipped_report.acc_hallucination, Some(sums.0 / counts.0 as f64));
        assert_eq!(flipped_report.acc_efficiency, Some(sums.1 / counts.1 as f64));
        assert_eq!(flipped_report.acc_adaptivity, Some(sums.2 / counts.2 as f64));

        assert!(started.elapsed() < Duration::from_secs(5), "oracle closure exceeded 5s");
    });
}

// ---------------------------------------------------------------------------
// 3. Thought-free dialect: binary exact-count efficiency
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_exact_count_dialect_matrix() {
    criterion(3, || {
        let mut ones = Vec::new();
        for labeled in 0..=3usize {
            for predicted in 0..=3usize {
                let steps: Vec<Step> = (0..3)
                    .map(|i| {
                        let mut s = step(
                            "",
                            "Calculator",
                            json!({"expression": format!("{i}+{i}")}),
                            "0",
                        );
                        if i < labeled {
                            s.labels = Some(StepLabels {
                                inefficient: Some(true),
                                ..Default::default()
                            });
                        }
                        s
                    })
                    .chain([terminal("", "0")])
                    .collect();
                let t = trajectory("matrix", steps, "0");
                let dataset = LabeledDataset {
                    dialect: Dialect::MetaMms,
                    trajectories: vec![t],
                    path: PathBuf::from("constructed"),
                };
                // A judge that keeps all but the first `predicted` entries,
                // i.e. predicts exactly `predicted` inefficient steps.
                let judge = ScriptedJudge::new(
                    GroundingRule::Constant { grounded: true },
                    MinEvidenceRule::Constant {
                        indices: (predicted + 1..=3).collect(),
                    },
                    AdaptivityRule::Constant { adaptive: true },
                    LabelIndex::from_trajectories(&[]),
                );
                let opts = MetaRunOptions { workers: 1, ..Default::default() };
                let report =
                    run_meta_eval(&judge, &dataset, EvidenceMode::WithBank, &opts);
                let expected = if predicted == labeled { 1.0 } else { 0.0 };
                assert_eq!(report.errored, 0);
                assert_eq!(
                    report.acc_efficiency,
                    Some(expected),
                    "predicted {predicted} vs labeled {labeled}"
                );
                assert_eq!(report.acc_hallucination, None);
                assert_eq!(report.acc_adaptivity, None);
                if report.acc_efficiency == Some(1.0) {
                    ones.push((predicted, labeled));
                }
            }
        }
        // Exactly the diagonal of the 16-case matrix scores 1.
        assert_eq!(ones, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    });
}

// ---------------------------------------------------------------------------
// 4. Harness feedback behavior
// ---------------------------------------------------------------------------

fn arithmetic_registry() -> ToolRegistry {
    let mut registry = ToolRegistry::new();
    registry
        .register(
            tool("Calculator", "Evaluates an arithmetic expression.", "expression"),
            Box::new(Calculator::new("expression")),
        )
        .unwrap();
    registry
        .register_fake(ToolDef {
            available: false,
            ..tool("FastCalculator", "Evaluates an arithmetic expression.", "expression")
        })
        .unwrap();
    registry
}

fn episode(turns: Vec<&str>) -> Trajectory {
    let registry = arithmetic_registry();
    let query = Query {
        id: "harness".into(),
        text: "What is 2+2?".into(),
        files: Vec::new(),
        answer_type: AnswerType::Ltr,
        gold: None,
    };
    let mut agent = ScriptedAgent::new(turns.into_iter().map(str::to_string).collect());
    run_episode(
        &mut agent,
        None,
        &query,
        &registry,
        &RunConfig::default(),
        &EpisodePrompts::default(),
    )
}

#[test]
fn criterion_4_harness_feedback() {
    criterion(4, || {
        // Unknown tool: feedback observation, counter, and a continuing episode.
        let t = episode(vec![
            "Thought: A translator should know.\nAction: Translator\nAction Input: {\"text\": \"2+2\"}",
            "Thought: No such tool; computing instead.\nAction: Calculator\nAction Input: {\"expression\": \"2+2\"}",
            "Thought: Done.\nFinal Answer: 4",
        ]);
        let feedback = t.steps[0].observation.as_deref().unwrap();
        assert!(feedback.contains("tool not in the list"), "feedback was {feedback:?}");
        assert_eq!(instruction_errors(&t).nonexistent_tool, 1);
        assert_eq!(t.meta.terminated_by, Termination::Answer);
        assert_eq!(t.final_answer, "4");

        // The fake twin fails with an observation the default patterns catch.
        let t = episode(vec![
            "Thought: The fast variant first.\nAction: FastCalculator\nAction Input: {\"expression\": \"2+2\"}",
            "Thought: Falling back to Calculator.\nAction: Calculator\nAction Input: {\"expression\": \"2+2\"}",
            "Thought: Done.\nFinal Answer: 4",
        ]);
        let observation = t.steps[0].observation.as_deref().unwrap();
        assert!(observation.contains("unavailable tool 'FastCalculator'"));
        assert!(FailurePatterns::default().is_failure(observation));
        assert_eq!(t.meta.terminated_by, Termination::Answer);

        // An agent that never answers is cut off at exactly max_turns.
        assert_eq!(RunConfig::default().max_turns, 10);
        let loop_turn =
            "Thought: Once more.\nAction: Calculator\nAction Input: {\"expression\": \"1+1\"}";
        let t = episode(vec![loop_turn; 12]);
        assert_eq!(t.meta.terminated_by, Termination::TurnLimit);
        assert_eq!(t.meta.turns, 10);
        assert_eq!(t.steps.len(), 11);
    });
}

// ---------------------------------------------------------------------------
// 5. Default fake-tool map
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_fake_tool_map() {
    criterion(5, || {
        let pair = |real: &str, fake: &str| FakeToolPair { real: real.into(), fake: fake.into() };
        let map = FakeToolMap::default();
        assert_eq!(
            map.pairs,
            vec![
                pair("Calculator", "FastCalculator"),
                pair("OCR", "FastOCR"),
                pair("ImageDescription", "ImageDescriptor"),
                pair("GoogleSearch", "WebSearch"),
            ]
        );

        let toolset = vec![
            tool("Calculator", "Evaluates an arithmetic expression.", "expression"),
            tool("OCR", "Reads text printed in an image.", "image"),
            tool("ImageDescription", "Describes the content of an image.", "image"),
            tool("GoogleSearch", "Searches the web for a query.", "query"),
        ];
        let extended = make_fake_toolset(&toolset, &map).unwrap();
        assert_eq!(extended.len(), 8);
        for p in &map.pairs {
            let real = extended.iter().find(|t| t.name == p.real).unwrap();
            let fake = extended.iter().find(|t| t.name == p.fake).unwrap();
            assert!(real.available);
            assert!(!fake.available);
            assert_eq!(fake.description.as_bytes(), real.description.as_bytes());
            assert_eq!(fake.parameters, real.parameters);
        }
    });
}

// ---------------------------------------------------------------------------
// 6. Micro-averaged accuracy
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_micro_average() {
    criterion(6, || {
        let row = |id: &str, answer_type: AnswerType, accuracy: f64| ReportRow {
            query_id: id.into(),
            answer_type,
            accuracy: Some(accuracy),
            efficiency: None,
            hallucination_reduction: None,
            adaptivity: None,
            nonexistent_tool_ratio: 0.0,
            bad_arguments_ratio: 0.0,
            turns: 1,
            output_tokens: 0,
            error: None,
        };
        let rows = vec![
            row("m1", AnswerType::Mcq, 1.0),
            row("m2", AnswerType::Mcq, 1.0),
            row("m3", AnswerType::Mcq, 0.0),
            row("l1", AnswerType::Ltr, 0.5),
            row("l2", AnswerType::Ltr, 0.5),
        ];
        let aggregate = aggregate_rows(&rows);
        assert_eq!(aggregate.overall_accuracy, Some(0.6));
        assert_eq!(aggregate.accuracy_per_type[&AnswerType::Mcq], 2.0 / 3.0);
        assert_eq!(aggregate.accuracy_per_type[&AnswerType::Ltr], 0.5);

        // The micro-average equals the count-weighted mean of the per-type
        // means (and differs from the unweighted macro mean, 0.5833…).
        let weighted = (3.0 * aggregate.accuracy_per_type[&AnswerType::Mcq]
            + 2.0 * aggregate.accuracy_per_type[&AnswerType::Ltr])
            / 5.0;
        assert!((aggregate.overall_accuracy.unwrap() - weighted).abs() < 1e-12);
    });
}

// ---------------------------------------------------------------------------
// 7. Multi-path robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_multipath_robustness() {
    criterion(7, || {
        let clean = read_ndjson(&fixture("clean_gta_mini.ndjson")).unwrap();
        let patterns = FailurePatterns::default();
        let mut saw_multiple_orders = false;
        for base in &clean {
            let graph = infer_dependencies(base);
            let orders = enumerate_valid_orders(base, &graph, 100).unwrap();
            saw_multiple_orders |= orders.len() >= 2;
            let mut scores = Vec::new();
            for order in &orders {
                let correct =
                    answer_correct(order, &BagOfTokensEmbedder, &patterns, DEFAULT_CORRECT_THRESHOLD)
                        .unwrap();
                assert!(correct, "{} became incorrect under reordering", base.id());
                let oracle = ScriptedJudge::label_oracle(std::slice::from_ref(order));
                let verdicts = collect_verdicts(
                    order,
                    &oracle,
                    EvidenceMode::WithBank,
                    &patterns,
                    true,
                    true,
                )
                .unwrap();
                let bank = EvidenceBank::build(order);
                let efficiency = efficiency_score(&bank, &verdicts.min_evidence, correct)
                    .unwrap()
                    .unwrap();
                scores.push(efficiency);
            }
            assert!(scores.iter().all(|&s| s == 1.0), "{}: {scores:?}", base.id());
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let variance = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                / scores.len() as f64;
            assert_eq!(variance.sqrt(), 0.0, "{}: σ must be zero", base.id());
        }
        assert!(saw_multiple_orders, "fixture must contain a trajectory with ≥2 valid orders");
    });
}

// ---------------------------------------------------------------------------
// 8. Round-trip and manifest validation
// ---------------------------------------------------------------------------

fn check_labeled_fixture(name: &str, dialect: Dialect) -> Vec<Trajectory> {
    let path = fixture(name);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut trajectories = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t = parse_trajectory(line.as_bytes(), TrajectoryFormat::Json).unwrap();
        assert_eq!(validate_structure(&t), vec![], "{} invalid: {}", name, t.id());
        assert_eq!(serialize_trajectory(&t), line.as_bytes(), "{}: {}", name, t.id());
        trajectories.push(t);
    }
    let declared = DatasetManifest::load(&manifest_sidecar_path(&path).unwrap()).unwrap();
    let recount = DatasetManifest::recount(dialect, &trajectories, &FailurePatterns::default())
        .unwrap();
    assert_eq!(declared, recount, "{name}: manifest drifted from its data");
    trajectories
}

#[test]
fn criterion_8_roundtrip_and_manifests() {
    criterion(8, || {
        let committed_gta = check_labeled_fixture("meta_gta_mini.ndjson", Dialect::MetaGta);
        check_labeled_fixture("meta_mms_mini.ndjson", Dialect::MetaMms);

        // A fresh augmentation run over the clean fixture reproduces the
        // committed dataset byte for byte, and every produced trajectory is
        // valid and value-faithful across one more round trip.
        let clean = read_ndjson(&fixture("clean_gta_mini.ndjson")).unwrap();
        let opts = AugmentOptions { seed: 42, ..Default::default() };
        let (fresh, manifest) = augment_dataset(&clean, &TemplateGenerator, &opts).unwrap();
        assert_eq!(fresh.len(), committed_gta.len());
        for (generated, committed) in fresh.iter().zip(&committed_gta) {
            assert_eq!(validate_structure(generated), vec![]);
            let bytes = serialize_trajectory(generated);
            let reloaded = parse_trajectory(&bytes, TrajectoryFormat::Json).unwrap();
            assert_eq!(&reloaded, generated);
            assert_eq!(generated, committed);
        }
        let declared =
            DatasetManifest::load(&manifest_sidecar_path(&fixture("meta_gta_mini.ndjson")).unwrap())
                .unwrap();
        assert_eq!(manifest, declared);

        // The published-scale manifests parse and declare the right dialects.
        let gta_full = DatasetManifest::load(&fixture("meta_gta_full.manifest.json")).unwrap();
        assert_eq!((gta_full.dialect, gta_full.total), (Dialect::MetaGta, 761));
        let mms_full = DatasetManifest::load(&fixture("meta_mms_full.manifest.json")).unwrap();
        assert_eq!((mms_full.dialect, mms_full.total), (Dialect::MetaMms, 735));
    });
}

// ---------------------------------------------------------------------------
// 9. Determinism and the wire client
// ---------------------------------------------------------------------------

/// Single-purpose HTTP fixture: serves `responses` sequentially on one
/// thread — optionally stalling before each reply — and records raw
/// requests. The thread exits after the last response.
struct WireStub {
    url: String,
    requests: Arc<Mutex<Vec<String>>>,
    handle: JoinHandle<()>,
}

impl WireStub {
    fn serve(responses: Vec<(u16, String)>, stall: Duration) -> WireStub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let recorded = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                recorded.lock().unwrap().push(read_request(&mut stream));
                std::thread::sleep(stall);
                let reason = match status {
                    200 => "OK",
                    401 => "Unauthorized",
                    500 => "Internal Server Error",
                    _ => "Status",
                };
                let reply = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\n\
                     content-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len(),
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        WireStub { url, requests, handle }
    }

    fn finish(self) -> Vec<String> {
        self.handle.join().expect("stub thread");
        Arc::try_unwrap(self.requests).unwrap().into_inner().unwrap()
    }
}

/// Reads one HTTP/1.1 request (head plus content-length body) as text.
fn read_request(stream: &mut TcpStream) -> String {
    let mut raw = Vec::new();
    let mut byte = [0u8; 1];
    while !raw.ends_with(b"\r\n\r\n") {
        if stream.read(&mut byte).unwrap_or(0) == 0 {
            break;
        }
        raw.push(byte[0]);
    }
    let head = String::from_utf8_lossy(&raw).to_string();
    let length: usize = head
        .lines()
        .find_map(|l| l.to_lowercase().strip_prefix("content-length:").map(str::to_string))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    let mut body = vec![0u8; length];
    if length > 0 {
        let _ = stream.read_exact(&mut body);
    }
    head + &String::from_utf8_lossy(&body)
}

fn chat_body(text: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"completion_tokens": 7}
    })
    .to_string()
}

fn stub_client(url: &str, attempts: u32, timeout: Duration) -> ChatClient {
    let mut config = ChatClientConfig::new(url, "stub-model");
    config.auth_env = Some("TRAJEVAL_ACCEPTANCE_TOKEN".into());
    config.timeout = timeout;
    config.retry = RetryPolicy {
        max_attempts: attempts,
        initial_backoff: Duration::from_millis(5),
        backoff_factor: 1.0,
    };
    ChatClient::new(config).unwrap()
}

#[test]
fn criterion_9_determinism_and_wire_client() {
    criterion(9, || {
        // Two full `evaluate` runs differ only in their timestamp.
        let input = fixture("meta_gta_mini.ndjson");
        let out = tempfile::tempdir().unwrap();
        let dirs = [out.path().join("first"), out.path().join("second")];
        for dir in &dirs {
            let output = Command::new(env!("CARGO_BIN_EXE_trajeval"))
                .env_clear()
                .args(["evaluate", "--seed", "7", "--input"])
                .arg(&input)
                .arg("--out-dir")
                .arg(dir)
                .output()
                .unwrap();
            assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        }
        let mut reports: Vec<Value> = dirs
            .iter()
            .map(|d| {
                serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap())
                    .unwrap()
            })
            .collect();
        for report in &mut reports {
            let stamp = report.as_object_mut().unwrap().remove("generated_at");
            assert!(stamp.is_some(), "report must carry a timestamp");
        }
        assert_eq!(reports[0], reports[1]);
        for csv in ["report_rows.csv", "report_aggregate.csv"] {
            assert_eq!(
                std::fs::read(dirs[0].join(csv)).unwrap(),
                std::fs::read(dirs[1].join(csv)).unwrap(),
                "{csv} differs between identical runs"
            );
        }

        // Wire client against a local stub: a transient 500 is retried…
        std::env::set_var("TRAJEVAL_ACCEPTANCE_TOKEN", "acceptance-secret");
        let stub = WireStub::serve(
            vec![(500, "{}".into()), (200, chat_body("hello"))],
            Duration::ZERO,
        );
        let client = stub_client(&stub.url, 3, Duration::from_secs(5));
        let reply = client.chat_complete(&[ChatMessage::user("ping")]).unwrap();
        assert_eq!(reply.text, "hello");
        assert_eq!(reply.completion_tokens, Some(7));
        let requests = stub.finish();
        assert_eq!(requests.len(), 2, "one retry expected after the 500");
        assert!(requests[0].to_lowercase().contains("authorization: bearer acceptance-secret"));
        assert!(requests[1].contains("\"model\":\"stub-model\""));

        // …a stalled reply times out…
        let stub = WireStub::serve(
            vec![(200, chat_body("late"))],
            Duration::from_millis(600),
        );
        let client = stub_client(&stub.url, 1, Duration::from_millis(150));
        let err = client.chat_complete(&[ChatMessage::user("ping")]).unwrap_err();
        match err {
            ClientError::BackendUnavailable { cause } => {
                assert!(cause.contains("timed out"), "cause was {cause:?}")
            }
            other => panic!("expected a timeout, got {other}"),
        }
        stub.finish();

        // …and an auth rejection fails fast without burning retries.
        let stub = WireStub::serve(vec![(401, "{}".into())], Duration::ZERO);
        let client = stub_client(&stub.url, 3, Duration::from_secs(5));
        let err = client.chat_complete(&[ChatMessage::user("ping")]).unwrap_err();
        assert!(matches!(err, ClientError::AuthRejected), "got {err}");
        assert_eq!(stub.finish().len(), 1, "auth failures must not retry");
    });
}
