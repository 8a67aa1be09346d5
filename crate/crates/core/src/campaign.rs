//! Campaign execution and the on-disk artifact layout.
//!
//! A run directory holds `records.jsonl` (every rollout of every seed),
//! per-seed trajectory and probe exports, optional transfer record files,
//! `ledgers.json`, `ledger.csv` and `manifest.json`. Only this module and the
//! CLI touch the filesystem.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    collect_batch, cross_subset_transfer, run_boa, run_boa_early_stop, Backends, BoaRun,
    BudgetLedger, LoopConfig, TrajectoryStep,
};
use crate::error::{GatewayError, StatsError};
use crate::evaluator::{Evaluator, EvaluatorProfile, RemoteEvaluator, SyntheticEvaluator};
use crate::hash::mix_str;
use crate::model::{
    validate_config, BackendKind, CampaignConfig, CheckpointRef, Mode, SampleRecord,
    SelectionStrategy, TaskId, TaskSpec,
};
use crate::policy::{PolicyGateway, RemotePolicy, Scenario, SyntheticPolicy};
use crate::records::{self, group_by_task_seed, RecordError};
use crate::report::{self, ComparisonRow, LedgerEntry, SelectionRow, Table};
use crate::scaling::{build_curve, CiMethod, ScalingError, DEFAULT_K_GRID};
use crate::selection::{
    detect_regime, quartile_breakdown, select, summarize, SelectionError, StrategySummary,
    DEFAULT_REGIME_MIN_SAMPLES, DEFAULT_REGIME_THRESHOLD,
};
use crate::stats::{
    anticalibration_probe, cohens_h, exact_sign_test, length_control_report, wilcoxon_signed_rank,
    ProbeResult, Transform,
};
use crate::transport::Transport;
use crate::TOOL_VERSION;

/// Overrides the configured remote endpoint.
pub const BACKEND_URL_ENV: &str = "TESTTIME_BACKEND_URL";

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEDGERS_FILE: &str = "ledgers.json";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("backend: {0}")]
    Backend(#[from] GatewayError),
    #[error("records: {0}")]
    Records(#[from] RecordError),
    #[error("analysis: {0}")]
    Analysis(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CampaignError {
    /// 2 config, 3 backend, 4 analysis or i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CampaignError::Config(_) => 2,
            CampaignError::Backend(_) => 3,
            _ => 4,
        }
    }

    fn analysis(e: impl ToString) -> Self {
        CampaignError::Analysis(e.to_string())
    }
}

impl From<SelectionError> for CampaignError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::Evaluator(g) => CampaignError::Backend(g),
            other => CampaignError::analysis(other),
        }
    }
}

impl From<ScalingError> for CampaignError {
    fn from(e: ScalingError) -> Self {
        CampaignError::analysis(e)
    }
}

impl From<StatsError> for CampaignError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Scoring(g) => CampaignError::Backend(g),
            other => CampaignError::analysis(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CampaignError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CampaignError> {
    let text = serde_json::to_string_pretty(value).map_err(CampaignError::analysis)?;
    write_file(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CampaignError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CampaignError::analysis(format!("{}: {e}", path.display())))
}

/// Reads and validates a campaign config.
pub fn load_config(path: &Path) -> Result<CampaignConfig, CampaignError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CampaignError::Config(vec![format!("{}: {e}", path.display())]))?;
    let mut config: CampaignConfig = serde_json::from_str(&text)
        .map_err(|e| CampaignError::Config(vec![format!("{}: {e}", path.display())]))?;
    if let Some(s) = &config.backend.scenario {
        let p = Path::new(s);
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                config.backend.scenario = Some(dir.join(p).to_string_lossy().into_owned());
            }
        }
    }
    let violations = validate_config(&config);
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(CampaignError::Config(violations))
    }
}

fn evaluator_profile(config: &CampaignConfig, kind: BackendKind) -> EvaluatorProfile {
    EvaluatorProfile {
        kind,
        trials_default: config.trials,
        timeout: Duration::from_millis(config.backend.timeout_ms),
        jitter: config.backend.jitter,
    }
}

fn remote_transport(endpoint: Option<&str>) -> Result<Arc<dyn Transport>, CampaignError> {
    let Some(url) = endpoint else {
        return Err(CampaignError::Config(vec![format!(
            "remote backend needs backend.endpoint or {BACKEND_URL_ENV}"
        )]));
    };
    #[cfg(feature = "remote")]
    {
        Ok(Arc::new(crate::transport::HttpTransport::new(url)))
    }
    #[cfg(not(feature = "remote"))]
    {
        Err(CampaignError::Config(vec![format!(
            "remote endpoint {url} configured but this build lacks the `remote` feature"
        )]))
    }
}

/// Every task the evaluator must know: campaign tasks plus transfer tasks.
fn all_task_specs(config: &CampaignConfig) -> Vec<TaskSpec> {
    let mut specs = config.tasks.clone();
    specs.extend(config.transfer_tasks.iter().map(|&t| TaskSpec::eval(t)));
    specs
}

/// Builds the configured backends; `endpoint` wins over the config's.
pub fn build_backends(
    config: &CampaignConfig,
    endpoint: Option<&str>,
) -> Result<Backends, CampaignError> {
    let endpoint = endpoint.or(config.backend.endpoint.as_deref());
    let policy: Arc<dyn crate::policy::Policy> = match config.backend.policy {
        BackendKind::Synthetic => {
            let scenario = match &config.backend.scenario {
                None => Scenario::stock(),
                Some(p) => {
                    let text = fs::read_to_string(p)
                        .map_err(|e| CampaignError::Config(vec![format!("{p}: {e}")]))?;
                    Scenario::from_json(&text)
                        .map_err(|e| CampaignError::Config(vec![format!("{p}: {e}")]))?
                }
            };
            Arc::new(SyntheticPolicy::new(scenario, config.checkpoint.clone()))
        }
        BackendKind::Remote => Arc::new(RemotePolicy::new(
            remote_transport(endpoint)?,
            Duration::from_millis(config.backend.timeout_ms),
            config.backend.max_in_flight,
        )),
    };
    let evaluator: Arc<dyn Evaluator> = match config.backend.evaluator {
        BackendKind::Synthetic => Arc::new(SyntheticEvaluator::new(
            &all_task_specs(config),
            evaluator_profile(config, BackendKind::Synthetic),
        )),
        BackendKind::Remote => Arc::new(RemoteEvaluator::new(
            remote_transport(endpoint)?,
            evaluator_profile(config, BackendKind::Remote),
            config.backend.max_in_flight,
        )),
    };
    Ok(Backends {
        policy: PolicyGateway::new(policy),
        evaluator,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the run directory.
    pub path: String,
    /// Data rows (records or CSV lines after the header).
    pub rows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSnapshot {
    pub policy: BackendKind,
    pub evaluator: EvaluatorProfile,
    pub endpoint: Option<String>,
    pub scenario: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoint {
    pub seed: u64,
    /// Set for per-task loops.
    pub task_id: Option<TaskId>,
    pub step: u32,
    pub checkpoint_id: String,
    pub fast1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub campaign_id: String,
    pub tool_version: String,
    pub created_unix_s: u64,
    pub config: CampaignConfig,
    pub backends: BackendSnapshot,
    pub seeds: Vec<u64>,
    pub complete: bool,
    pub errors: Vec<String>,
    pub record_count: u64,
    pub selected: Vec<SelectedCheckpoint>,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, CampaignError> {
        read_json(&dir.join(MANIFEST_FILE))
    }
}

/// Stable identifier derived from the config alone.
pub fn campaign_id(config: &CampaignConfig) -> String {
    let text = serde_json::to_string(config).expect("configs serialize");
    format!("{}-{:016x}", config.mode.name(), mix_str(&text))
}

/// Appends records to one file; the only writer for it.
struct RecordSink {
    path: PathBuf,
    file: File,
    count: u64,
}

impl RecordSink {
    fn create(path: PathBuf) -> Result<Self, CampaignError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            file,
            count: 0,
        })
    }

    fn append(&mut self, recs: &[SampleRecord]) -> Result<(), CampaignError> {
        let mut buf = String::new();
        for r in recs {
            buf.push_str(&records::to_line(r));
            buf.push('\n');
        }
        self.file
            .write_all(buf.as_bytes())
            .map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.count += recs.len() as u64;
        Ok(())
    }
}

/// Outcome of [`cmd_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub ledgers: Vec<LedgerEntry>,
    /// Aggregate selection results for Best-of-N runs.
    pub selection: Vec<StrategySummary>,
    pub runs: Vec<(u64, BoaRun)>,
    pub probes: Vec<(u64, ProbeResult)>,
}

struct RunState<'a> {
    dir: &'a Path,
    artifacts: Vec<Artifact>,
    errors: Vec<String>,
    ledgers: Vec<LedgerEntry>,
    selected: Vec<SelectedCheckpoint>,
}

impl RunState<'_> {
    fn table(&mut self, kind: &str, name: &str, table: &Table) -> Result<(), CampaignError> {
        write_file(&self.dir.join(name), &table.to_csv())?;
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: name.into(),
            rows: table.rows.len() as u64,
        });
        Ok(())
    }

    fn json<T: Serialize>(
        &mut self,
        kind: &str,
        name: &str,
        value: &T,
        rows: u64,
    ) -> Result<(), CampaignError> {
        write_json(&self.dir.join(name), value)?;
        self.artifacts.push(Artifact {
            kind: kind.into(),
            path: name.into(),
            rows,
        });
        Ok(())
    }

    fn note_error(&mut self, context: &str, e: &GatewayError) {
        self.errors.push(format!("{context}: {e}"));
    }
}

fn loop_errors(run: &BoaRun) -> Vec<String> {
    let mut out = Vec::new();
    for s in &run.trajectory {
        if s.failed_rollouts > 0 {
            out.push(format!(
                "step {}: {} failed rollouts",
                s.step, s.failed_rollouts
            ));
        }
        if let Some(e) = &s.adapt_error {
            out.push(format!("step {}: adapt failed: {e}", s.step));
        }
    }
    out
}

fn run_loop(
    config: &LoopConfig,
    ck0: &CheckpointRef,
    backends: &Backends,
    patience: Option<u32>,
) -> Result<BoaRun, CampaignError> {
    let run = match patience {
        Some(p) => run_boa_early_stop(config, ck0, backends, p),
        None => run_boa(config, ck0, backends),
    };
    run.map_err(|e| CampaignError::Analysis(e.to_string()))
}

/// Runs a validated campaign into `out_dir`.
///
/// Backend failures never abort the run: they become failed rollouts, the
/// manifest is marked incomplete and everything finished so far is kept.
pub fn cmd_run(
    config: &CampaignConfig,
    backends: &Backends,
    out_dir: &Path,
) -> Result<RunSummary, CampaignError> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return Err(CampaignError::Config(violations));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let created_unix_s = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut st = RunState {
        dir: out_dir,
        artifacts: Vec::new(),
        errors: Vec::new(),
        ledgers: Vec::new(),
        selected: Vec::new(),
    };
    let mut sink = RecordSink::create(out_dir.join(RECORDS_FILE))?;
    let ck0 = backends.policy.root(&config.checkpoint)?;
    let tasks = config.task_ids();
    let mut selection = Vec::new();
    let mut bon_records = Vec::new();
    let mut runs = Vec::new();
    let mut probes = Vec::new();

    for &seed in &config.seeds {
        let arm = format!("seed{seed}");
        match config.mode {
            Mode::BestOfN => {
                let started = crate::clock::Stopwatch::start();
                let (recs, failed, err) = collect_batch(
                    backends,
                    &ck0,
                    &tasks,
                    config.k,
                    seed,
                    config.temperature,
                    config.max_tokens,
                    config.trials,
                    config.workers,
                );
                if let Some(e) = err {
                    st.note_error(&format!("{arm}: {failed} failed rollouts"), &e);
                }
                sink.append(&recs)?;
                let mut ledger = BudgetLedger::default();
                ledger.add_records(&recs);
                ledger.wall_clock_ms = started.elapsed_ms();
                st.ledgers.push(LedgerEntry {
                    arm,
                    records_file: RECORDS_FILE.into(),
                    ledger,
                });
                bon_records.extend(recs);
            }
            Mode::BatchTtt | Mode::SdpoFeedback | Mode::SdpoPromptOnly | Mode::Probe => {
                if config.mode == Mode::Probe && config.steps == 0 {
                    // Nothing to adapt; the probe reduces to the base checkpoint.
                    let (recs, _, err) = collect_batch(
                        backends,
                        &ck0,
                        &tasks,
                        config.k,
                        seed,
                        config.temperature,
                        config.max_tokens,
                        config.trials,
                        config.workers,
                    );
                    if let Some(e) = err {
                        st.note_error(&arm, &e);
                    }
                    sink.append(&recs)?;
                    let mut ledger = BudgetLedger::default();
                    ledger.add_records(&recs);
                    st.ledgers.push(LedgerEntry {
                        arm: arm.clone(),
                        records_file: RECORDS_FILE.into(),
                        ledger,
                    });
                    let probe = probe_fixed(backends, &recs, std::slice::from_ref(&ck0), config)?;
                    write_probe(&mut st, seed, &recs, std::slice::from_ref(&ck0), &probe)?;
                    probes.push((seed, probe));
                    continue;
                }
                let lc = LoopConfig::from_campaign(config, seed);
                let run = run_loop(&lc, &ck0, backends, config.patience)?;
                for e in loop_errors(&run) {
                    st.errors.push(format!("{arm}: {e}"));
                }
                for recs in &run.records {
                    sink.append(recs)?;
                }
                st.ledgers.push(LedgerEntry {
                    arm: arm.clone(),
                    records_file: RECORDS_FILE.into(),
                    ledger: run.ledger.clone(),
                });
                st.selected.push(SelectedCheckpoint {
                    seed,
                    task_id: None,
                    step: run.selected_step,
                    checkpoint_id: run.selected.id.clone(),
                    fast1: run.trajectory[run.selected_step as usize].aggregate_fast1,
                });
                st.table(
                    "trajectory",
                    &format!("trajectory_seed{seed}.csv"),
                    &report::trajectory_table(&run.trajectory, seed, Some(run.selected_step)),
                )?;
                st.json(
                    "trajectory_json",
                    &format!("trajectory_seed{seed}.json"),
                    &run.trajectory,
                    run.trajectory.len() as u64,
                )?;
                if config.mode == Mode::Probe {
                    let cks: Vec<CheckpointRef> = run
                        .trajectory
                        .iter()
                        .map(|s| s.checkpoint.clone())
                        .collect();
                    let probe = probe_fixed(backends, &run.records[0], &cks, config)?;
                    write_probe(&mut st, seed, &run.records[0], &cks, &probe)?;
                    probes.push((seed, probe));
                }
                if !config.transfer_tasks.is_empty() {
                    run_transfer(&mut st, config, backends, seed, &ck0, &run.selected)?;
                }
                runs.push((seed, run));
            }
            Mode::PerTaskTtt => {
                let mut merged: Vec<TrajectoryStep> = Vec::new();
                let mut ledger = BudgetLedger::default();
                for &task in &tasks {
                    let mut lc = LoopConfig::from_campaign(config, seed);
                    lc.tasks = vec![task];
                    let run = run_loop(&lc, &ck0, backends, config.patience)?;
                    for e in loop_errors(&run) {
                        st.errors.push(format!("{arm} task {task}: {e}"));
                    }
                    for recs in &run.records {
                        sink.append(recs)?;
                    }
                    ledger.absorb(&run.ledger);
                    st.selected.push(SelectedCheckpoint {
                        seed,
                        task_id: Some(task),
                        step: run.selected_step,
                        checkpoint_id: run.selected.id.clone(),
                        fast1: run.trajectory[run.selected_step as usize].aggregate_fast1,
                    });
                    merge_trajectory(&mut merged, &run.trajectory, tasks.len());
                    runs.push((seed, run));
                }
                st.ledgers.push(LedgerEntry {
                    arm: arm.clone(),
                    records_file: RECORDS_FILE.into(),
                    ledger,
                });
                st.table(
                    "trajectory",
                    &format!("trajectory_seed{seed}.csv"),
                    &report::trajectory_table(&merged, seed, None),
                )?;
                st.json(
                    "trajectory_json",
                    &format!("trajectory_seed{seed}.json"),
                    &merged,
                    merged.len() as u64,
                )?;
            }
        }
    }

    st.artifacts.insert(
        0,
        Artifact {
            kind: "records".into(),
            path: RECORDS_FILE.into(),
            rows: sink.count,
        },
    );

    if config.mode == Mode::BestOfN {
        let evaluator = config.retime_top3.then(|| backends.evaluator.as_ref());
        let seed = config.seeds[0];
        let out = selection_report(&bon_records, &config.strategy_list, seed, evaluator)?;
        // Attribute re-timing to the seed whose samples were re-timed.
        for entry in &mut st.ledgers {
            let seed_of_arm: u64 = entry.arm.trim_start_matches("seed").parse().unwrap_or(0);
            entry.ledger.extra_timing_evals += out
                .rows
                .iter()
                .filter(|r| r.seed == seed_of_arm)
                .map(|r| u64::from(r.extra_evals_used))
                .sum::<u64>();
        }
        write_selection(&mut st, &out, seed, config.retime_top3)?;
        selection = out.summaries;
    }

    st.json(
        "ledgers",
        LEDGERS_FILE,
        &st.ledgers.clone(),
        st.ledgers.len() as u64,
    )?;
    let ledger_table = report::ledger_table(&st.ledgers);
    st.table("ledger", "ledger.csv", &ledger_table)?;

    let manifest = RunManifest {
        campaign_id: campaign_id(config),
        tool_version: TOOL_VERSION.into(),
        created_unix_s,
        config: config.clone(),
        backends: BackendSnapshot {
            policy: backends.policy.kind(),
            evaluator: backends.evaluator.profile().clone(),
            endpoint: config.backend.endpoint.clone(),
            scenario: config.backend.scenario.clone(),
        },
        seeds: config.seeds.clone(),
        complete: st.errors.is_empty(),
        errors: st.errors.clone(),
        record_count: sink.count,
        selected: st.selected.clone(),
        artifacts: st.artifacts.clone(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunSummary {
        manifest,
        ledgers: st.ledgers,
        selection,
        runs,
        probes,
    })
}

/// Folds one single-task trajectory into the per-step campaign view.
fn merge_trajectory(merged: &mut Vec<TrajectoryStep>, run: &[TrajectoryStep], n_tasks: usize) {
    for s in run {
        let i = s.step as usize;
        if merged.len() <= i {
            merged.push(TrajectoryStep {
                step: s.step,
                checkpoint: s.checkpoint.clone(),
                cumulative_rollouts: 0,
                aggregate_fast1: 0.0,
                per_task_fast1: BTreeMap::new(),
                failed_rollouts: 0,
                adapt_error: None,
            });
        }
        let m = &mut merged[i];
        m.cumulative_rollouts += s.cumulative_rollouts;
        m.aggregate_fast1 += s.aggregate_fast1 / n_tasks as f64;
        m.per_task_fast1
            .extend(s.per_task_fast1.iter().map(|(k, v)| (*k, *v)));
        m.failed_rollouts += s.failed_rollouts;
        if m.adapt_error.is_none() {
            m.adapt_error.clone_from(&s.adapt_error);
        }
    }
}

fn run_transfer(
    st: &mut RunState<'_>,
    config: &CampaignConfig,
    backends: &Backends,
    seed: u64,
    base: &CheckpointRef,
    adapted: &CheckpointRef,
) -> Result<(), CampaignError> {
    let mut rows = Vec::new();
    for (label, ck) in [("base", base), ("adapted", adapted)] {
        let report = cross_subset_transfer(
            ck,
            &config.transfer_tasks,
            config.k,
            seed,
            config.temperature,
            config.max_tokens,
            config.trials,
            backends,
        )
        .map_err(|e| match e {
            crate::adaptation::AdaptationError::Gateway(g) => CampaignError::Backend(g),
            other => CampaignError::analysis(other),
        })?;
        let file = format!("transfer_{label}_seed{seed}.jsonl");
        let path = st.dir.join(&file);
        records::save_records(&path, &report.records).map_err(io_err(&path))?;
        st.artifacts.push(Artifact {
            kind: "transfer_records".into(),
            path: file.clone(),
            rows: report.records.len() as u64,
        });
        st.ledgers.push(LedgerEntry {
            arm: format!("seed{seed}-transfer-{label}"),
            records_file: file,
            ledger: report.ledger.clone(),
        });
        for (task, f) in &report.per_task_fast1 {
            rows.push(vec![
                label.to_string(),
                ck.id.clone(),
                task.to_string(),
                report::num(*f),
            ]);
        }
        rows.push(vec![
            label.to_string(),
            ck.id.clone(),
            "all".into(),
            report::num(report.aggregate_fast1),
        ]);
    }
    let table = Table {
        meta: report::Meta::new("transfer")
            .with("seed", seed)
            .with("K", config.k),
        header: ["arm", "checkpoint", "task_id", "fast1"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows,
    };
    st.table("transfer", &format!("transfer_seed{seed}.csv"), &table)
}

/// Saved form of a probe, enough to recompute it with another tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeArtifact {
    pub checkpoints: Vec<CheckpointRef>,
    pub samples: Vec<SampleRecord>,
    pub result: ProbeResult,
}

fn probe_fixed(
    backends: &Backends,
    samples: &[SampleRecord],
    checkpoints: &[CheckpointRef],
    config: &CampaignConfig,
) -> Result<ProbeResult, CampaignError> {
    Ok(anticalibration_probe(
        samples,
        checkpoints,
        |ck, rec| backends.policy.score_nll(ck, rec),
        config.tail_fraction,
        config.workers,
    )?)
}

fn write_probe(
    st: &mut RunState<'_>,
    seed: u64,
    samples: &[SampleRecord],
    checkpoints: &[CheckpointRef],
    probe: &ProbeResult,
) -> Result<(), CampaignError> {
    let keys: Vec<_> = samples.iter().map(SampleRecord::key).collect();
    let artifact = ProbeArtifact {
        checkpoints: checkpoints.to_vec(),
        samples: samples.to_vec(),
        result: probe.clone(),
    };
    st.json(
        "probe_json",
        &format!("probe_seed{seed}.json"),
        &artifact,
        probe.per_step.len() as u64,
    )?;
    st.table(
        "probe",
        &format!("probe_seed{seed}.csv"),
        &report::probe_table(probe),
    )?;
    st.table(
        "probe_nll",
        &format!("probe_nll_seed{seed}.csv"),
        &report::probe_matrix_table(probe, &keys),
    )?;
    Ok(())
}

/// Recomputes a probe from its saved NLL matrix with a different tail.
pub fn reprobe(artifact: &ProbeArtifact, tail_fraction: f64) -> Result<ProbeResult, CampaignError> {
    let index: BTreeMap<(TaskId, u64, u32), usize> = artifact
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.key(), i))
        .collect();
    let step_of: BTreeMap<&str, usize> = artifact
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let nll = &artifact.result.nll;
    Ok(anticalibration_probe(
        &artifact.samples,
        &artifact.checkpoints,
        |ck, rec| {
            let c = step_of
                .get(ck.id.as_str())
                .ok_or_else(|| GatewayError::UnknownCheckpoint(ck.id.clone()))?;
            let i = index[&rec.key()];
            Ok(nll[*c][i])
        },
        tail_fraction,
        Some(1),
    )?)
}

/// Selection rows, per-strategy summaries and paired tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    pub rows: Vec<SelectionRow>,
    pub summaries: Vec<StrategySummary>,
    pub comparisons: Vec<ComparisonRow>,
}

/// Pairs worth testing when both strategies were run.
const COMPARISONS: [(SelectionStrategy, SelectionStrategy); 4] = [
    (
        SelectionStrategy::SurprisalGuided,
        SelectionStrategy::ConfidenceGuided,
    ),
    (
        SelectionStrategy::SurprisalGuided,
        SelectionStrategy::RandomCorrect,
    ),
    (
        SelectionStrategy::SurprisalGuidedTop3,
        SelectionStrategy::SurprisalGuided,
    ),
    (
        SelectionStrategy::OracleBestCorrect,
        SelectionStrategy::SurprisalGuidedTop3,
    ),
];

type UnitResult = ((TaskId, u64), crate::selection::SelectionResult);

/// Applies every strategy to every `(task, seed)` unit of `records`.
pub fn selection_report(
    records: &[SampleRecord],
    strategies: &[SelectionStrategy],
    rng_seed: u64,
    evaluator: Option<&dyn Evaluator>,
) -> Result<SelectionOutput, CampaignError> {
    if records.is_empty() {
        return Err(CampaignError::Analysis("no records".into()));
    }
    if strategies.is_empty() {
        return Err(CampaignError::Analysis("no strategies".into()));
    }
    let groups = group_by_task_seed(records);
    let mut rows = Vec::new();
    let mut results: BTreeMap<SelectionStrategy, Vec<UnitResult>> = BTreeMap::new();
    for (&(task, seed), group) in &groups {
        let regime =
            match detect_regime(group, DEFAULT_REGIME_THRESHOLD, DEFAULT_REGIME_MIN_SAMPLES) {
                Ok(l) => l.label.name().to_string(),
                Err(SelectionError::TooFew { .. }) => "insufficient_samples".to_string(),
                Err(e) => return Err(e.into()),
            };
        for &strategy in strategies {
            let r = select(strategy, group, rng_seed, evaluator)?;
            rows.push(SelectionRow {
                task_id: task,
                seed,
                strategy,
                chosen_sample_index: r.chosen_index(),
                fast1: r.fast1,
                speedup: r.speedup,
                extra_evals_used: r.extra_evals_used,
                regime_label: regime.clone(),
            });
            results.entry(strategy).or_default().push(((task, seed), r));
        }
    }
    let summaries = strategies
        .iter()
        .map(|s| {
            let rs: Vec<&crate::selection::SelectionResult> =
                results[s].iter().map(|(_, r)| r).collect();
            summarize(*s, &rs)
        })
        .collect();
    let mut comparisons = Vec::new();
    for (a, b) in COMPARISONS {
        let (Some(ra), Some(rb)) = (results.get(&a), results.get(&b)) else {
            continue;
        };
        let units = ra.len();
        let fa = ra.iter().filter(|(_, r)| r.fast1).count() as f64 / units as f64;
        let fb = rb.iter().filter(|(_, r)| r.fast1).count() as f64 / units as f64;
        let discordant = ra
            .iter()
            .zip(rb)
            .filter(|((_, x), (_, y))| x.fast1 != y.fast1)
            .count() as u32;
        let wins_a = ra
            .iter()
            .zip(rb)
            .filter(|((_, x), (_, y))| x.fast1 && !y.fast1)
            .count() as u32;
        let pairs: Vec<(f64, f64)> = ra
            .iter()
            .zip(rb)
            .filter(|((_, x), (_, y))| x.speedup > 0.0 && y.speedup > 0.0)
            .map(|((_, x), (_, y))| (x.speedup, y.speedup))
            .collect();
        let wilcoxon_p = wilcoxon_signed_rank(&pairs, Transform::LogRatio)
            .ok()
            .map(|w| w.p_greater);
        comparisons.push(ComparisonRow {
            a,
            b,
            units,
            fast1_a: fa,
            fast1_b: fb,
            cohens_h: cohens_h(fa, fb),
            wins_a,
            discordant,
            sign_p: exact_sign_test(wins_a, discordant)?,
            wilcoxon_p,
        });
    }
    Ok(SelectionOutput {
        rows,
        summaries,
        comparisons,
    })
}

fn write_selection(
    st: &mut RunState<'_>,
    out: &SelectionOutput,
    seed: u64,
    retimed: bool,
) -> Result<(), CampaignError> {
    st.table(
        "selection",
        "selection.csv",
        &report::selection_table(&out.rows, seed, DEFAULT_REGIME_THRESHOLD, retimed),
    )?;
    st.table(
        "selection_summary",
        "selection_summary.csv",
        &report::summary_table(&out.summaries),
    )?;
    st.table(
        "selection_tests",
        "selection_tests.csv",
        &report::comparison_table(&out.comparisons),
    )
}

/// Post-hoc selection over a record file; writes the three selection CSVs.
pub fn cmd_select(
    records_path: &Path,
    strategies: &[SelectionStrategy],
    rng_seed: u64,
    out_dir: &Path,
) -> Result<SelectionOutput, CampaignError> {
    let recs = records::load_records(records_path)?;
    let out = selection_report(&recs, strategies, rng_seed, None)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut st = RunState {
        dir: out_dir,
        artifacts: Vec::new(),
        errors: Vec::new(),
        ledgers: Vec::new(),
        selected: Vec::new(),
    };
    write_selection(&mut st, &out, rng_seed, false)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisKind {
    Scaling,
    EquivalentK,
    Selection,
    Trajectory,
    Regime,
    Quartile,
    Probe,
    Ledger,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 8] = [
        AnalysisKind::Scaling,
        AnalysisKind::EquivalentK,
        AnalysisKind::Selection,
        AnalysisKind::Trajectory,
        AnalysisKind::Regime,
        AnalysisKind::Quartile,
        AnalysisKind::Probe,
        AnalysisKind::Ledger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Scaling => "scaling",
            AnalysisKind::EquivalentK => "equivalent_k",
            AnalysisKind::Selection => "selection",
            AnalysisKind::Trajectory => "trajectory",
            AnalysisKind::Regime => "regime",
            AnalysisKind::Quartile => "quartile",
            AnalysisKind::Probe => "probe",
            AnalysisKind::Ledger => "ledger",
        }
    }
}

impl std::str::FromStr for AnalysisKind {
    type Err = CampaignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        AnalysisKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| CampaignError::Analysis(format!("unknown analysis '{s}'")))
    }
}

/// Knobs shared by the analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub ci_method: CiMethod,
    pub seed: u64,
    pub tail_fraction: Option<f64>,
    /// fast1 levels to invert for `equivalent_k`.
    pub targets: Vec<f64>,
    pub ks: Vec<u32>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            ci_method: CiMethod::Auto,
            seed: 0,
            tail_fraction: None,
            targets: Vec::new(),
            ks: DEFAULT_K_GRID.to_vec(),
        }
    }
}

fn curve_from_records(
    recs: &[SampleRecord],
    opts: &AnalysisOptions,
) -> Result<crate::scaling::ScalingCurve, CampaignError> {
    let groups = group_by_task_seed(recs);
    let min_n = groups.values().map(Vec::len).min().unwrap_or(0) as u32;
    let ks: Vec<u32> = opts.ks.iter().copied().filter(|&k| k <= min_n).collect();
    if ks.is_empty() {
        return Err(CampaignError::Analysis(format!(
            "no K in the grid fits {min_n} samples per unit"
        )));
    }
    Ok(build_curve(&groups, &ks, opts.ci_method, opts.seed)?)
}

/// Computes `kind` from `input` and writes its CSV(s) to `out_dir`. Nothing
/// is written when the analysis fails.
pub fn cmd_analyze(
    kind: AnalysisKind,
    input: &Path,
    out_dir: &Path,
    opts: &AnalysisOptions,
) -> Result<Vec<PathBuf>, CampaignError> {
    let tables: Vec<(String, Table)> = match kind {
        AnalysisKind::Scaling => {
            let curve = curve_from_records(&records::load_records(input)?, opts)?;
            vec![("scaling.csv".into(), report::curve_table(&curve))]
        }
        AnalysisKind::EquivalentK => {
            if opts.targets.is_empty() {
                return Err(CampaignError::Analysis(
                    "equivalent_k needs at least one --target".into(),
                ));
            }
            let curve = curve_from_records(&records::load_records(input)?, opts)?;
            vec![(
                "equivalent_k.csv".into(),
                report::equivalent_k_table(&curve, &opts.targets),
            )]
        }
        AnalysisKind::Selection => {
            let out = selection_report(
                &records::load_records(input)?,
                &SelectionStrategy::ALL,
                opts.seed,
                None,
            )?;
            vec![
                (
                    "selection.csv".into(),
                    report::selection_table(&out.rows, opts.seed, DEFAULT_REGIME_THRESHOLD, false),
                ),
                (
                    "selection_summary.csv".into(),
                    report::summary_table(&out.summaries),
                ),
                (
                    "selection_tests.csv".into(),
                    report::comparison_table(&out.comparisons),
                ),
            ]
        }
        AnalysisKind::Trajectory => {
            let steps: Vec<TrajectoryStep> = read_json(input)?;
            if steps.is_empty() {
                return Err(CampaignError::Analysis("empty trajectory".into()));
            }
            let scores: Vec<f64> = steps.iter().map(|s| s.aggregate_fast1).collect();
            let best = crate::adaptation::boa_select(&scores).map(|i| steps[i].step);
            vec![(
                "trajectory.csv".into(),
                report::trajectory_table(&steps, opts.seed, best),
            )]
        }
        AnalysisKind::Regime => {
            let recs = records::load_records(input)?;
            let mut labels = Vec::new();
            for (&(_, seed), g) in &group_by_task_seed(&recs) {
                labels.push((
                    seed,
                    detect_regime(g, DEFAULT_REGIME_THRESHOLD, DEFAULT_REGIME_MIN_SAMPLES)?,
                ));
            }
            vec![(
                "regime.csv".into(),
                report::regime_table(
                    &labels,
                    DEFAULT_REGIME_THRESHOLD,
                    DEFAULT_REGIME_MIN_SAMPLES,
                ),
            )]
        }
        AnalysisKind::Quartile => {
            let recs = records::load_records(input)?;
            let buckets = quartile_breakdown(&recs)?;
            let mut out = vec![(
                "quartile.csv".into(),
                report::quartile_table(&buckets, recs.len()),
            )];
            if let Ok(lc) = length_control_report(&recs) {
                out.push((
                    "length_control.csv".into(),
                    report::length_control_table(&lc),
                ));
            }
            out
        }
        AnalysisKind::Probe => {
            let artifact: ProbeArtifact = read_json(input)?;
            let tail = opts.tail_fraction.unwrap_or(artifact.result.tail_fraction);
            let probe = reprobe(&artifact, tail)?;
            let keys: Vec<_> = artifact.samples.iter().map(SampleRecord::key).collect();
            vec![
                ("probe.csv".into(), report::probe_table(&probe)),
                (
                    "probe_nll.csv".into(),
                    report::probe_matrix_table(&probe, &keys),
                ),
            ]
        }
        AnalysisKind::Ledger => {
            let entries = match read_json::<Vec<LedgerEntry>>(input) {
                Ok(e) => e,
                Err(_) => {
                    let recs = records::load_records(input)?;
                    let mut ledger = BudgetLedger::default();
                    ledger.add_records(&recs);
                    vec![LedgerEntry {
                        arm: "records".into(),
                        records_file: input
                            .file_name()
                            .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                        ledger,
                    }]
                }
            };
            if entries.is_empty() {
                return Err(CampaignError::Analysis("no ledgers".into()));
            }
            vec![("ledger.csv".into(), report::ledger_table(&entries))]
        }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for (name, table) in tables {
        let path = out_dir.join(name);
        write_file(&path, &table.to_csv())?;
        written.push(path);
    }
    Ok(written)
}

fn count_lines(path: &Path) -> Result<u64, CampaignError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut n = 0;
    for line in BufReader::new(f).lines() {
        if !line.map_err(io_err(path))?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

/// Result of auditing a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconciliation {
    pub manifest: RunManifest,
    pub ledgers: Vec<LedgerEntry>,
    pub issues: Vec<String>,
}

impl Reconciliation {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Checks that every listed artifact exists, record counts match line counts
/// and each record file is accounted for by its ledgers exactly.
pub fn cmd_report(run_dir: &Path) -> Result<Reconciliation, CampaignError> {
    let manifest = RunManifest::load(run_dir)?;
    let ledgers: Vec<LedgerEntry> = read_json(&run_dir.join(LEDGERS_FILE))?;
    let mut issues = Vec::new();
    let mut by_file: BTreeMap<&str, u64> = BTreeMap::new();
    for l in &ledgers {
        *by_file.entry(l.records_file.as_str()).or_default() += l.ledger.rollouts;
    }
    for a in &manifest.artifacts {
        let path = run_dir.join(&a.path);
        if !path.exists() {
            issues.push(format!("missing artifact {}", a.path));
            continue;
        }
        if a.path.ends_with(".jsonl") {
            let lines = count_lines(&path)?;
            if lines != a.rows {
                issues.push(format!(
                    "{}: manifest says {} records, file has {lines}",
                    a.path, a.rows
                ));
            }
            let booked = by_file.get(a.path.as_str()).copied().unwrap_or(0);
            if booked != lines {
                issues.push(format!(
                    "{}: ledgers book {booked} rollouts, file has {lines}",
                    a.path
                ));
            }
        }
    }
    if manifest.record_count
        != manifest
            .artifacts
            .iter()
            .find(|a| a.kind == "records")
            .map_or(0, |a| a.rows)
    {
        issues.push("manifest record_count disagrees with the records artifact".into());
    }
    write_file(
        &run_dir.join("ledger.csv"),
        &report::ledger_table(&ledgers).to_csv(),
    )?;
    Ok(Reconciliation {
        manifest,
        ledgers,
        issues,
    })
}
