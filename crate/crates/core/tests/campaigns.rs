//! End-to-end campaign behaviour on synthetic and replay backends.

mod common;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use common::*;
use testtime_core::adaptation::{
    cross_subset_transfer, run_boa, run_boa_early_stop, step_seed, AdaptationError, Backends,
    LoopConfig, UpdateRule,
};
use testtime_core::campaign::{build_backends, cmd_run, load_config, RunManifest, RECORDS_FILE};
use testtime_core::evaluator::SyntheticEvaluator;
use testtime_core::model::{BackendKind, CheckpointRef, Mode, SelectionStrategy};
use testtime_core::policy::{PolicyGateway, ReplayPolicy};
use testtime_core::records::group_by_task_seed;
use testtime_core::selection::{quartile_breakdown, select};
use testtime_core::stats::{wilcoxon_signed_rank, Transform};

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .expect("csv")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        - 1
}

#[test]
fn shipped_configs_load_and_budget_matches_plan() {
    for entry in std::fs::read_dir(config_path("")).expect("configs") {
        let path = entry.expect("entry").path();
        let config = load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(
            config.rollout_budget,
            config.planned_rollouts(),
            "{}",
            path.display()
        );
    }
}

#[test]
fn selection_fixture_matches_designed_picks() {
    for unit in &SELECTION_UNITS {
        let recs = unit_records(unit);
        assert_eq!(recs.len(), 64);
        let pick = |s| select(s, &recs, 0, None).expect("select").speedup;
        assert_eq!(pick(SelectionStrategy::SurprisalGuided), unit.surprisal);
        assert_eq!(pick(SelectionStrategy::ConfidenceGuided), unit.confidence);
        assert_eq!(pick(SelectionStrategy::SurprisalGuidedTop3), unit.top3);
        assert_eq!(pick(SelectionStrategy::OracleBestCorrect), unit.oracle);
    }
}

#[test]
fn selection_fixture_wilcoxon_matches_reference() {
    let pairs: Vec<(f64, f64)> = SELECTION_UNITS
        .iter()
        .map(|u| (u.surprisal, u.confidence))
        .collect();
    let w = wilcoxon_signed_rank(&pairs, Transform::LogRatio).expect("wilcoxon");
    assert_eq!(w.statistic, 10.0);
    assert!(
        (w.p_two_sided - 0.083984375).abs() < 1e-12,
        "{}",
        w.p_two_sided
    );
}

#[test]
fn quartile_fixture_rates() {
    let buckets = quartile_breakdown(&quartile_records()).expect("quartiles");
    let rates: Vec<String> = buckets
        .iter()
        .map(|b| format!("{:.1}", 100.0 * b.fast1_rate))
        .collect();
    assert_eq!(rates, ["47.4", "81.0", "72.3", "43.9"]);
    assert!(buckets.iter().all(|b| b.count == 253));
}

#[test]
fn transfer_replay_reproduces_both_directions() {
    let (backends, base, adapted) =
        scripted_transfer(&SUBSET1, &SUBSET2, &[6, 6, 6, 5, 5], &[3, 3, 2, 2, 2], 42);
    let run = |ck: &CheckpointRef| {
        cross_subset_transfer(ck, &SUBSET2, 32, 42, 0.25, 1024, 5, &backends).expect("transfer")
    };
    assert!((run(&base).aggregate_fast1 - 0.175).abs() < 1e-12);
    assert!((run(&adapted).aggregate_fast1 - 0.075).abs() < 1e-12);

    let (backends, base, adapted) = scripted_transfer(&SUBSET2, &SUBSET1, &[12; 5], &[10; 5], 42);
    let base_r =
        cross_subset_transfer(&base, &SUBSET1, 32, 42, 0.25, 1024, 5, &backends).expect("transfer");
    let adapted_r = cross_subset_transfer(&adapted, &SUBSET1, 32, 42, 0.25, 1024, 5, &backends)
        .expect("transfer");
    assert!((base_r.aggregate_fast1 - 0.375).abs() < 1e-12);
    assert!((adapted_r.aggregate_fast1 - 0.3125).abs() < 1e-12);
    assert_eq!(adapted_r.ledger.rollouts, 160);
}

#[test]
fn transfer_rejects_overlap() {
    let (backends, _, adapted) = scripted_transfer(&SUBSET1, &SUBSET2, &[1; 5], &[1; 5], 42);
    let err =
        cross_subset_transfer(&adapted, &[4, 18], 32, 42, 0.25, 1024, 5, &backends).unwrap_err();
    assert_eq!(err, AdaptationError::OverlapDetected(vec![4]));
}

#[test]
fn unadapted_transfer_equals_step_zero() {
    let config = load_config(&config_path("batch_ttt.json")).expect("config");
    let backends = build_backends(&config, None).expect("backends");
    let ck0 = backends.policy.root(&config.checkpoint).expect("root");
    let cfg = LoopConfig::from_campaign(&config, 42);
    let run = run_boa(&cfg, &ck0, &backends).expect("run");
    let same = cross_subset_transfer(
        &ck0,
        &cfg.tasks,
        cfg.k,
        42,
        cfg.temperature,
        cfg.max_tokens,
        cfg.trials,
        &backends,
    )
    .expect("transfer");
    assert_eq!(same.aggregate_fast1, run.trajectory[0].aggregate_fast1);
}

#[test]
fn early_stop_with_patience_at_least_steps_is_full_loop() {
    let (backends, cfg, ck0) = scripted_trajectory(&TRAJECTORY_COUNTS, 32, 42);
    let full = run_boa(&cfg, &ck0, &backends).expect("full");
    for p in [5, 6, 50] {
        let (backends, cfg, ck0) = scripted_trajectory(&TRAJECTORY_COUNTS, 32, 42);
        let early = run_boa_early_stop(&cfg, &ck0, &backends, p).expect("early");
        assert_eq!(early.scores(), full.scores());
        assert_eq!(early.selected_step, full.selected_step);
        assert!(!early.stopped_early);
    }
    let (backends, cfg, ck0) = scripted_trajectory(&TRAJECTORY_COUNTS, 32, 42);
    let p1 = run_boa_early_stop(&cfg, &ck0, &backends, 1).expect("early");
    assert!(p1.stopped_early);
    assert_eq!(p1.scores().len(), 4);
    assert_eq!(p1.selected_step, 2);
    assert_eq!(p1.ledger.rollouts, 4 * 160);
    assert_eq!(
        run_boa_early_stop(&cfg, &ck0, &backends, 0).unwrap_err(),
        AdaptationError::BadPatience
    );
}

#[test]
fn failed_step_scores_zero_and_keeps_budget() {
    let seed = 7;
    let mut policy = ReplayPolicy::new()
        .with_root("theta0")
        .with_child("theta0", "theta1");
    for &t in &SUBSET1 {
        policy = policy.with_samples(
            "theta0",
            t,
            step_seed(seed, 0),
            scripted_batch(t, seed, 4, 3),
        );
    }
    let backends = Backends {
        policy: PolicyGateway::new(Arc::new(policy)),
        evaluator: Arc::new(SyntheticEvaluator::with_tasks(&SUBSET1)),
    };
    let cfg = LoopConfig {
        tasks: SUBSET1.to_vec(),
        k: 4,
        steps: 1,
        learning_rate: 1e-5,
        temperature: 0.25,
        max_tokens: 1024,
        seed,
        trials: 5,
        workers: None,
        update: UpdateRule::Reward,
    };
    let run = run_boa(
        &cfg,
        &CheckpointRef::root("theta0", BackendKind::Synthetic),
        &backends,
    )
    .expect("run");
    assert_eq!(run.scores(), vec![0.75, 0.0]);
    assert_eq!(run.selected_step, 0);
    assert!(run.first_error.is_some());
    assert_eq!(run.ledger.rollouts, 40);
    assert!(run.records[1].iter().all(|r| r
        .outcome
        .error_trace
        .as_deref()
        .is_some_and(|t| t.starts_with("backend error"))));
}

#[test]
fn per_task_campaign_writes_merged_trajectory() {
    let config = load_config(&config_path("per_task_ttt.json")).expect("config");
    let mut config = config;
    config.seeds = vec![42];
    let backends = build_backends(&config, None).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    assert!(summary.manifest.complete);
    assert_eq!(
        csv_rows(&dir.path().join("trajectory_seed42.csv")),
        config.steps as usize + 1
    );
    assert_eq!(summary.manifest.selected.len(), config.tasks.len());
    assert!(summary
        .manifest
        .selected
        .iter()
        .all(|s| s.task_id.is_some()));
}

#[test]
fn probe_campaign_scores_every_cell() {
    let config = load_config(&config_path("probe.json")).expect("config");
    assert_eq!(config.mode, Mode::Probe);
    let backends = build_backends(&config, None).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    let samples = config.tasks.len() * config.k as usize;
    let cells = samples * (config.steps as usize + 1);
    assert_eq!(csv_rows(&dir.path().join("probe_nll_seed42.csv")), cells);
    assert_eq!(
        summary.probes[0].1.per_step.len(),
        config.steps as usize + 1
    );
}

#[test]
fn transfer_campaign_books_a_separate_ledger() {
    let mut config = load_config(&config_path("batch_ttt.json")).expect("config");
    config.seeds = vec![42];
    config.steps = 1;
    config.rollout_budget = config.planned_rollouts();
    let backends = build_backends(&config, None).expect("backends");
    let dir = tempfile::tempdir().expect("tempdir");
    let summary = cmd_run(&config, &backends, dir.path()).expect("run");
    let main: u64 = summary
        .ledgers
        .iter()
        .filter(|l| !l.arm.contains("transfer"))
        .map(|l| l.ledger.rollouts)
        .sum();
    let transfer: u64 = summary
        .ledgers
        .iter()
        .filter(|l| l.arm.contains("transfer"))
        .map(|l| l.ledger.rollouts)
        .sum();
    assert_eq!(main, config.rollout_budget);
    assert_eq!(transfer, 2 * 5 * u64::from(config.k));
    assert!(dir.path().join("transfer_seed42.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let mut config = load_config(&config_path("batch_ttt_early_stop.json")).expect("config");
    config.seeds = vec![43];
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    for dir in [&a, &b] {
        let backends = build_backends(&config, None).expect("backends");
        cmd_run(&config, &backends, dir.path()).expect("run");
    }
    for file in [RECORDS_FILE, "trajectory_seed43.csv", "ledger.csv"] {
        let x = std::fs::read(a.path().join(file)).expect("a");
        let y = std::fs::read(b.path().join(file)).expect("b");
        assert!(x == y, "{file} differs between runs");
    }
    let m = RunManifest::load(a.path()).expect("manifest");
    assert_eq!(
        m.record_count as usize,
        std::fs::read_to_string(a.path().join(RECORDS_FILE))
            .expect("records")
            .lines()
            .count()
    );
}

#[test]
fn scaling_fixture_groups_into_ten_cells() {
    let groups = group_by_task_seed(&scaling_records());
    assert_eq!(groups.len(), 10);
    assert!(groups.values().all(|v| v.len() == 64));
}
