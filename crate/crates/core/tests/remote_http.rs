//! Remote backends against an in-process HTTP server speaking the wire protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use testtime_core::adaptation::BudgetLedger;
use testtime_core::campaign::{build_backends, cmd_report, cmd_run, RECORDS_FILE};
use testtime_core::evaluator::{EvalRequest, Evaluator, EvaluatorProfile, RemoteEvaluator};
use testtime_core::model::{BackendKind, CampaignConfig, Mode};
use testtime_core::transport::HttpTransport;
use testtime_core::GatewayError;

const TOKENS: usize = 8;

struct Mock {
    url: String,
    calls: Arc<AtomicU64>,
}

fn route(path: &str, body: &Value, jobs: &AtomicU64) -> (u16, Value) {
    let ck = body["checkpoint_id"].as_str().unwrap_or_default();
    if !ck.is_empty() && !ck.starts_with("base") {
        return (200, json!({ "error": "unknown_checkpoint" }));
    }
    match path {
        "/evaluate" => {
            let task = body["task_id"].as_u64().unwrap_or(0);
            if task == 99 {
                return (500, json!({ "detail": "boom" }));
            }
            if task == 98 {
                return (200, json!({ "error": "unknown_task" }));
            }
            let code = body["code"].as_str().unwrap_or_default();
            let i: u64 = code
                .rsplit('|')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            let correct = i % 5 != 4;
            let speedup = 0.5 + 0.4 * (i % 4) as f64;
            (
                200,
                json!({ "compiled": true, "correct": correct, "speedup": speedup, "runtime": 1.0 / speedup, "error_trace": null }),
            )
        }
        "/sample" => {
            let k = body["K"].as_u64().unwrap_or(0);
            let task = body["prompt_id"].as_u64().unwrap_or(0);
            let seed = body["seed"].as_u64().unwrap_or(0);
            let samples: Vec<Value> = (0..k)
                .map(|i| {
                    json!({
                        "code": format!("{ck}|{task}|{seed}|{i}"),
                        "token_count": TOKENS,
                        "total_logprob": -1.0 - i as f64 - 0.01 * (seed % 7) as f64,
                    })
                })
                .collect();
            (200, json!({ "samples": samples }))
        }
        "/score" => (200, json!({ "nll": 3.0 + ck.len() as f64 * 0.1 })),
        "/score_tokens" => {
            let shift = if body["context"].is_null() { 0.0 } else { 0.2 };
            let lp: Vec<f64> = (0..TOKENS)
                .map(|t| -0.5 - 0.01 * t as f64 + shift)
                .collect();
            (200, json!({ "logprobs": lp }))
        }
        "/adapt" => {
            let n = jobs.fetch_add(1, Ordering::SeqCst);
            (200, json!({ "job_id": format!("{ck}#{n}") }))
        }
        "/poll" => {
            let job = body["job_id"].as_str().unwrap_or_default();
            let (parent, n) = job.split_once('#').unwrap_or((job, "0"));
            (200, json!({ "new_checkpoint_id": format!("{parent}+{n}") }))
        }
        _ => (404, json!({})),
    }
}

fn serve(stream: TcpStream, jobs: &AtomicU64) {
    let mut reader = BufReader::new(stream.try_clone().expect("clone stream"));
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
        return;
    }
    let path = request_line
        .split_whitespace()
        .nth(1)
        .unwrap_or("/")
        .to_string();
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let parsed: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, reply) = route(&path, &parsed, jobs);
    let text = reply.to_string();
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn start_mock() -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().expect("addr"));
    let calls = Arc::new(AtomicU64::new(0));
    let jobs = Arc::new(AtomicU64::new(0));
    let counter = Arc::clone(&calls);
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            counter.fetch_add(1, Ordering::SeqCst);
            let jobs = Arc::clone(&jobs);
            std::thread::spawn(move || serve(stream, &jobs));
        }
    });
    Mock { url, calls }
}

fn remote(mut config: CampaignConfig) -> CampaignConfig {
    config.backend.policy = BackendKind::Remote;
    config.backend.evaluator = BackendKind::Remote;
    config.backend.timeout_ms = 10_000;
    config.backend.max_in_flight = 4;
    config.workers = Some(4);
    config
}

fn record_lines(dir: &std::path::Path) -> usize {
    std::fs::read_to_string(dir.join(RECORDS_FILE))
        .expect("records")
        .lines()
        .count()
}

#[test]
fn best_of_n_over_http() {
    let mock = start_mock();
    let config = remote(CampaignConfig::best_of_n(&[1, 2], 8, vec![3]));
    let backends = build_backends(&config, Some(&mock.url)).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    assert!(summary.manifest.complete, "{:?}", summary.manifest.errors);
    assert_eq!(record_lines(dir.path()), 16);
    assert_eq!(summary.selection.len(), 5);
    // Two sample calls plus sixteen evaluations at minimum.
    assert!(mock.calls.load(Ordering::SeqCst) >= 18);
    let oracle = summary
        .selection
        .iter()
        .find(|s| s.strategy == testtime_core::model::SelectionStrategy::OracleBestCorrect)
        .expect("oracle");
    assert_eq!(oracle.fast1_count, 2);
    assert!(cmd_report(dir.path()).expect("report").ok());
}

#[test]
fn batch_adaptation_chains_remote_checkpoints() {
    let mock = start_mock();
    let config = remote(CampaignConfig::adaptive(
        Mode::BatchTtt,
        &[1, 2],
        4,
        2,
        vec![5],
    ));
    let backends = build_backends(&config, Some(&mock.url)).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    assert!(summary.manifest.complete, "{:?}", summary.manifest.errors);
    let (_, run) = &summary.runs[0];
    assert_eq!(run.trajectory.len(), 3);
    let ids: Vec<&str> = run
        .trajectory
        .iter()
        .map(|s| s.checkpoint.id.as_str())
        .collect();
    assert_eq!(ids[0], "base");
    assert!(
        ids[1].starts_with("base+") && ids[2].starts_with(ids[1]),
        "{ids:?}"
    );
    assert_eq!(run.ledger.rollouts, 24);
    assert_eq!(record_lines(dir.path()), 24);
}

#[test]
fn sdpo_books_teacher_tokens_over_http() {
    let mock = start_mock();
    let config = remote(CampaignConfig::adaptive(
        Mode::SdpoFeedback,
        &[1],
        4,
        1,
        vec![5],
    ));
    let backends = build_backends(&config, Some(&mock.url)).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    assert!(summary.manifest.complete, "{:?}", summary.manifest.errors);
    let total: BudgetLedger = summary
        .ledgers
        .iter()
        .fold(BudgetLedger::default(), |mut acc, l| {
            acc.absorb(&l.ledger);
            acc
        });
    assert_eq!(total.rollouts, 8);
    assert!(total.teacher_tokens > 0);
}

#[test]
fn unknown_checkpoint_leaves_an_incomplete_but_balanced_run() {
    let mock = start_mock();
    let mut config = remote(CampaignConfig::best_of_n(&[1], 4, vec![1]));
    config.checkpoint = "nope".into();
    let backends = build_backends(&config, Some(&mock.url)).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    assert!(!summary.manifest.complete);
    assert!(
        summary.manifest.errors.iter().any(|e| e.contains("nope")),
        "{:?}",
        summary.manifest.errors
    );
    assert_eq!(record_lines(dir.path()), 4);
    assert!(cmd_report(dir.path()).expect("report").ok());
}

#[test]
fn evaluator_maps_http_and_domain_errors() {
    let mock = start_mock();
    let ev = RemoteEvaluator::new(
        Arc::new(HttpTransport::new(mock.url.clone())),
        EvaluatorProfile {
            kind: BackendKind::Remote,
            timeout: Duration::from_secs(5),
            ..EvaluatorProfile::default()
        },
        2,
    );
    let ok = ev
        .evaluate(&EvalRequest {
            task_id: 1,
            code: "x|3",
            trials: 5,
        })
        .expect("evaluate");
    assert!(ok.correct && (ok.speedup - 1.7).abs() < 1e-12);
    let broken = ev.evaluate(&EvalRequest {
        task_id: 99,
        code: "x|1",
        trials: 5,
    });
    assert!(
        matches!(broken, Err(GatewayError::Protocol(_))),
        "{broken:?}"
    );
    let unknown = ev.evaluate(&EvalRequest {
        task_id: 98,
        code: "x|1",
        trials: 5,
    });
    assert_eq!(unknown, Err(GatewayError::UnknownTask(98)));
}
