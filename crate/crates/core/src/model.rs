//! Shared domain types and campaign-config validation.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub type TaskId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetTag {
    Subset1,
    Subset2,
    Extended,
}

/// One benchmark task. `baseline_time` is the reference runtime in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default)]
    pub subset_tag: Option<SubsetTag>,
    #[serde(default = "default_baseline_time")]
    pub baseline_time: f64,
}

fn default_split() -> Split {
    Split::Eval
}

fn default_baseline_time() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn eval(task_id: TaskId) -> Self {
        Self {
            task_id,
            split: Split::Eval,
            subset_tag: None,
            baseline_time: 1.0,
        }
    }

    pub fn tagged(task_id: TaskId, tag: SubsetTag) -> Self {
        Self {
            subset_tag: Some(tag),
            ..Self::eval(task_id)
        }
    }
}

/// Subset 1 evaluation tasks.
pub const SUBSET1: [TaskId; 5] = [4, 5, 12, 14, 15];
/// Subset 2 evaluation tasks.
pub const SUBSET2: [TaskId; 5] = [18, 28, 29, 30, 32];
/// Remaining tasks of the full 20-task eval set.
pub const EXTENDED: [TaskId; 10] = [36, 55, 65, 70, 76, 82, 87, 89, 95, 98];

/// Result of executing one candidate.
///
/// The chain `correct => compiled`, `!correct => speedup == 0` holds for every
/// outcome this crate constructs; [`EvalOutcome::is_consistent`] checks it for
/// outcomes coming from elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub compiled: bool,
    pub correct: bool,
    pub speedup: f64,
    pub runtime: f64,
    pub error_trace: Option<String>,
    pub trials: u32,
}

impl EvalOutcome {
    pub fn compile_failure(trace: impl Into<String>, trials: u32) -> Self {
        Self {
            compiled: false,
            correct: false,
            speedup: 0.0,
            runtime: 0.0,
            error_trace: Some(trace.into()),
            trials: trials.max(1),
        }
    }

    pub fn incorrect(trace: impl Into<String>, trials: u32) -> Self {
        Self {
            compiled: true,
            ..Self::compile_failure(trace, trials)
        }
    }

    pub fn correct(speedup: f64, runtime: f64, trials: u32) -> Self {
        Self {
            compiled: true,
            correct: true,
            speedup,
            runtime,
            error_trace: None,
            trials: trials.max(1),
        }
    }

    pub fn is_consistent(&self) -> bool {
        (!self.correct || self.compiled)
            && (self.correct || self.speedup == 0.0)
            && self.speedup >= 0.0
            && self.runtime >= 0.0
            && self.trials >= 1
    }
}

/// A generated candidate before evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub task_id: TaskId,
    pub seed: u64,
    pub sample_index: u32,
    pub code: String,
    pub token_count: u32,
    /// Sum of per-token log-probabilities, in nats.
    pub total_logprob: f64,
}

impl Candidate {
    pub fn with_outcome(self, outcome: EvalOutcome) -> SampleRecord {
        SampleRecord {
            task_id: self.task_id,
            seed: self.seed,
            sample_index: self.sample_index,
            code: self.code,
            token_count: self.token_count,
            total_logprob: self.total_logprob,
            outcome,
        }
    }
}

/// One evaluated candidate; the unit of the run-record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task_id: TaskId,
    pub seed: u64,
    pub sample_index: u32,
    pub code: String,
    pub token_count: u32,
    pub total_logprob: f64,
    #[serde(flatten)]
    pub outcome: EvalOutcome,
}

impl SampleRecord {
    pub fn key(&self) -> (TaskId, u64, u32) {
        (self.task_id, self.seed, self.sample_index)
    }

    /// Mean per-token log-probability. Derivable, never used for selection.
    pub fn mean_token_logprob(&self) -> f64 {
        self.total_logprob / f64::from(self.token_count.max(1))
    }

    pub fn candidate(&self) -> Candidate {
        Candidate {
            task_id: self.task_id,
            seed: self.seed,
            sample_index: self.sample_index,
            code: self.code.clone(),
            token_count: self.token_count,
            total_logprob: self.total_logprob,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.total_logprob <= 0.0) {
            v.push(format!("total_logprob {} > 0", self.total_logprob));
        }
        if self.token_count == 0 {
            v.push("token_count must be >= 1".into());
        }
        if !self.outcome.is_consistent() {
            v.push("outcome violates correct => compiled / speedup chain".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BestOfN,
    BatchTtt,
    PerTaskTtt,
    SdpoFeedback,
    SdpoPromptOnly,
    Probe,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::BestOfN => "best_of_n",
            Mode::BatchTtt => "batch_ttt",
            Mode::PerTaskTtt => "per_task_ttt",
            Mode::SdpoFeedback => "sdpo_feedback",
            Mode::SdpoPromptOnly => "sdpo_prompt_only",
            Mode::Probe => "probe",
        }
    }

    pub fn adapts(self) -> bool {
        !matches!(self, Mode::BestOfN)
    }
}

/// Post-hoc strategies for picking one sample out of a task's candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    OracleBestCorrect,
    RandomCorrect,
    ConfidenceGuided,
    SurprisalGuided,
    SurprisalGuidedTop3,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 5] = [
        SelectionStrategy::OracleBestCorrect,
        SelectionStrategy::SurprisalGuidedTop3,
        SelectionStrategy::SurprisalGuided,
        SelectionStrategy::RandomCorrect,
        SelectionStrategy::ConfidenceGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionStrategy::OracleBestCorrect => "oracle_best_correct",
            SelectionStrategy::RandomCorrect => "random_correct",
            SelectionStrategy::ConfidenceGuided => "confidence_guided",
            SelectionStrategy::SurprisalGuided => "surprisal_guided",
            SelectionStrategy::SurprisalGuidedTop3 => "surprisal_guided_top3",
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().replace('-', "_");
        SelectionStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Remote,
}

/// Where the policy and evaluator backends live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub policy: BackendKind,
    #[serde(default)]
    pub evaluator: BackendKind,
    /// Base URL of the remote service; overridden by `TESTTIME_BACKEND_URL`.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Path of a synthetic scenario file; the stock scenario when absent.
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Multiplicative per-trial timing jitter of the synthetic evaluator.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_timeout_ms() -> u64 {
    600_000
}

fn default_in_flight() -> usize {
    8
}

fn default_jitter() -> f64 {
    0.05
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            policy: BackendKind::Synthetic,
            evaluator: BackendKind::Synthetic,
            endpoint: None,
            scenario: None,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_in_flight(),
            jitter: default_jitter(),
        }
    }
}

/// A fully seeded experiment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub tasks: Vec<TaskSpec>,
    pub mode: Mode,
    #[serde(rename = "K")]
    pub k: u32,
    #[serde(default)]
    pub steps: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub patience: Option<u32>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_strategies")]
    pub strategy_list: Vec<SelectionStrategy>,
    pub rollout_budget: u64,
    /// Identifier of the starting checkpoint; two plans are only comparable
    /// when they start from the same one.
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Timing trials per evaluation (5 = fast proxy, 50 = full protocol).
    #[serde(default = "default_trials")]
    pub trials: u32,
    /// Re-time the top-3 candidates instead of reusing recorded speedups.
    #[serde(default)]
    pub retime_top3: bool,
    /// Upper bound on concurrent sampling/evaluation workers.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Fraction of highest-NLL samples used for the probe's tail correlation.
    #[serde(default = "default_tail_fraction")]
    pub tail_fraction: f64,
    /// Held-out tasks the selected checkpoint is evaluated on after
    /// adaptation; must not overlap `tasks`.
    #[serde(default)]
    pub transfer_tasks: Vec<TaskId>,
}

fn default_temperature() -> f64 {
    0.25
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_learning_rate() -> f64 {
    1e-5
}

fn default_beta() -> f64 {
    1.0
}

fn default_strategies() -> Vec<SelectionStrategy> {
    SelectionStrategy::ALL.to_vec()
}

fn default_checkpoint() -> String {
    "base".to_string()
}

fn default_trials() -> u32 {
    5
}

fn default_tail_fraction() -> f64 {
    0.25
}

impl CampaignConfig {
    /// A Best-of-N plan over `tasks` with the budget filled in.
    pub fn best_of_n(tasks: &[TaskId], k: u32, seeds: Vec<u64>) -> Self {
        let mut c = Self {
            tasks: tasks.iter().map(|&t| TaskSpec::eval(t)).collect(),
            mode: Mode::BestOfN,
            k,
            steps: 0,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            learning_rate: default_learning_rate(),
            patience: None,
            beta: default_beta(),
            seeds,
            strategy_list: default_strategies(),
            rollout_budget: 0,
            checkpoint: default_checkpoint(),
            backend: BackendConfig::default(),
            trials: default_trials(),
            retime_top3: false,
            workers: None,
            tail_fraction: default_tail_fraction(),
            transfer_tasks: Vec::new(),
        };
        c.rollout_budget = c.planned_rollouts();
        c
    }

    /// An adaptation plan (`mode` must adapt) with the budget filled in.
    pub fn adaptive(mode: Mode, tasks: &[TaskId], k: u32, steps: u32, seeds: Vec<u64>) -> Self {
        let mut c = Self {
            mode,
            steps,
            ..Self::best_of_n(tasks, k, seeds)
        };
        c.rollout_budget = c.planned_rollouts();
        c
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }

    /// Rollouts one seed of this plan consumes.
    ///
    /// Best-of-N draws `K` per task once. Every adaptive mode draws `K` per
    /// task for the step-0 reference batch (or the probe's fixed sample set)
    /// and again at each of the `steps` adaptation steps.
    pub fn planned_rollouts(&self) -> u64 {
        let per_batch = self.tasks.len() as u64 * u64::from(self.k);
        match self.mode {
            Mode::BestOfN => per_batch,
            _ => per_batch * (u64::from(self.steps) + 1),
        }
    }
}

/// Returns every violated invariant; empty means the config is usable.
pub fn validate_config(config: &CampaignConfig) -> Vec<String> {
    let mut v = Vec::new();
    if config.tasks.is_empty() {
        v.push("tasks must not be empty".to_string());
    }
    let mut seen = HashSet::new();
    for t in &config.tasks {
        if !seen.insert(t.task_id) {
            v.push(format!("duplicate task_id {}", t.task_id));
        }
        if !(t.baseline_time > 0.0) || !t.baseline_time.is_finite() {
            v.push(format!("task {}: baseline_time must be > 0", t.task_id));
        }
    }
    if config.k < 1 {
        v.push("K must be >= 1".to_string());
    }
    if !(config.temperature >= 0.0) {
        v.push("temperature must be >= 0".to_string());
    }
    if config.max_tokens < 1 {
        v.push("max_tokens must be >= 1".to_string());
    }
    if !(config.learning_rate > 0.0) {
        v.push("learning_rate must be > 0".to_string());
    }
    if !config.beta.is_finite() {
        v.push("beta must be finite".to_string());
    }
    if config.seeds.is_empty() {
        v.push("seeds must not be empty".to_string());
    }
    if config.trials < 1 {
        v.push("trials must be >= 1".to_string());
    }
    if !(config.tail_fraction > 0.0 && config.tail_fraction <= 1.0) {
        v.push("tail_fraction must be in (0, 1]".to_string());
    }
    match config.mode {
        Mode::BestOfN => {
            if config.strategy_list.is_empty() {
                v.push("best_of_n needs at least one selection strategy".to_string());
            }
        }
        Mode::BatchTtt | Mode::PerTaskTtt | Mode::SdpoFeedback | Mode::SdpoPromptOnly => {
            if config.steps < 1 {
                v.push(format!("{}: steps must be >= 1", config.mode.name()));
            }
        }
        Mode::Probe => {}
    }
    if !config.transfer_tasks.is_empty() {
        if !config.mode.adapts() {
            v.push(format!(
                "{}: transfer_tasks need an adapting mode",
                config.mode.name()
            ));
        }
        let own: HashSet<TaskId> = config.tasks.iter().map(|t| t.task_id).collect();
        let overlap: Vec<String> = config
            .transfer_tasks
            .iter()
            .filter(|t| own.contains(t))
            .map(|t| t.to_string())
            .collect();
        if !overlap.is_empty() {
            v.push(format!(
                "transfer_tasks overlap tasks: {}",
                overlap.join(", ")
            ));
        }
    }
    if let Some(p) = config.patience {
        if p < 1 {
            v.push("patience must be >= 1".to_string());
        }
    }
    let planned = config.planned_rollouts();
    if config.rollout_budget != planned {
        v.push(format!(
            "budget mismatch: rollout_budget {} but plan uses {} rollouts per seed",
            config.rollout_budget, planned
        ));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub step: u32,
    pub parent: String,
}

/// Opaque handle to a policy checkpoint plus its adaptation ancestry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub id: String,
    /// Ancestors from the root, oldest first; `step` is the ancestor's own step.
    #[serde(default)]
    pub lineage: Vec<LineageEntry>,
    pub backend_kind: BackendKind,
    /// Tasks whose rollouts have fed an update anywhere along the lineage.
    #[serde(default)]
    pub adapted_on: BTreeSet<TaskId>,
}

impl CheckpointRef {
    pub fn root(id: impl Into<String>, backend_kind: BackendKind) -> Self {
        Self {
            id: id.into(),
            lineage: Vec::new(),
            backend_kind,
            adapted_on: BTreeSet::new(),
        }
    }

    /// Adaptation step of this checkpoint (0 for a root).
    pub fn step(&self) -> u32 {
        self.lineage.len() as u32
    }

    pub fn child(&self, id: impl Into<String>, tasks: impl IntoIterator<Item = TaskId>) -> Self {
        let mut lineage = self.lineage.clone();
        lineage.push(LineageEntry {
            step: self.step(),
            parent: self.id.clone(),
        });
        let mut adapted_on = self.adapted_on.clone();
        adapted_on.extend(tasks);
        Self {
            id: id.into(),
            lineage,
            backend_kind: self.backend_kind,
            adapted_on,
        }
    }

    /// Id of the lineage root; adaptation on one lineage is serialized on it.
    pub fn lineage_root(&self) -> &str {
        self.lineage
            .first()
            .map(|e| e.parent.as_str())
            .unwrap_or(&self.id)
    }

    pub fn validate_lineage(&self) -> Result<(), String> {
        let mut ids = HashSet::new();
        ids.insert(self.id.as_str());
        let mut last: Option<u32> = None;
        for e in &self.lineage {
            if !ids.insert(e.parent.as_str()) {
                return Err(format!("lineage cycle through {}", e.parent));
            }
            if last.is_some_and(|s| e.step <= s) {
                return Err(format!("lineage steps not increasing at {}", e.parent));
            }
            last = Some(e.step);
        }
        Ok(())
    }
}
