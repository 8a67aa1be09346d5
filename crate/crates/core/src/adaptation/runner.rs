//! The sample → evaluate → update loop.

use std::collections::BTreeMap;

use super::{
    boa_select, build_teacher_context, estimate_tokens, score_batch, sdpo_advantages,
    AdaptationError, Backends, BudgetLedger, SdpoVariant, TrajectoryStep,
};
use crate::error::GatewayError;
use crate::evaluator::EvalRequest;
use crate::hash::mix;
use crate::model::{
    CampaignConfig, Candidate, CheckpointRef, EvalOutcome, Mode, SampleRecord, TaskId,
};
use crate::parallel::map_ordered;
use crate::policy::{task_prompt, Rollout, SampleBatchRequest};

/// Sampling seed of step `step`; step 0 keeps the campaign seed so the
/// reference batch matches a Best-of-N draw with the same seed.
pub fn step_seed(seed: u64, step: u32) -> u64 {
    if step == 0 {
        seed
    } else {
        mix(&[seed, u64::from(step), 0x5EED])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateRule {
    /// Rewards are execution speedups (zero when incorrect).
    Reward,
    /// Rewards are summed self-distillation advantages.
    Sdpo { variant: SdpoVariant, beta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub tasks: Vec<TaskId>,
    pub k: u32,
    pub steps: u32,
    pub learning_rate: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub trials: u32,
    pub workers: Option<usize>,
    pub update: UpdateRule,
}

impl LoopConfig {
    pub fn from_campaign(config: &CampaignConfig, seed: u64) -> Self {
        let update = match config.mode {
            Mode::SdpoFeedback => UpdateRule::Sdpo {
                variant: SdpoVariant::Feedback,
                beta: config.beta,
            },
            Mode::SdpoPromptOnly => UpdateRule::Sdpo {
                variant: SdpoVariant::PromptOnly,
                beta: config.beta,
            },
            _ => UpdateRule::Reward,
        };
        Self {
            tasks: config.task_ids(),
            k: config.k,
            steps: config.steps,
            learning_rate: config.learning_rate,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            seed,
            trials: config.trials,
            workers: config.workers,
            update,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoaRun {
    pub trajectory: Vec<TrajectoryStep>,
    pub selected: CheckpointRef,
    pub selected_step: u32,
    /// Records of each executed step, step 0 first.
    pub records: Vec<Vec<SampleRecord>>,
    pub ledger: BudgetLedger,
    pub stopped_early: bool,
    /// First backend error seen, if any.
    pub first_error: Option<GatewayError>,
}

impl BoaRun {
    pub fn scores(&self) -> Vec<f64> {
        self.trajectory.iter().map(|s| s.aggregate_fast1).collect()
    }
}

fn failed_rollout(
    task_id: TaskId,
    seed: u64,
    index: u32,
    err: &GatewayError,
    trials: u32,
) -> SampleRecord {
    Candidate {
        task_id,
        seed,
        sample_index: index,
        code: String::new(),
        token_count: 1,
        total_logprob: 0.0,
    }
    .with_outcome(EvalOutcome::compile_failure(
        format!("backend error: {err}"),
        trials,
    ))
}

/// Draws `k` samples per task from `checkpoint` and evaluates them. Backend
/// failures become failed rollouts so the budget still adds up; the count and
/// the first error are returned alongside.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch(
    backends: &Backends,
    checkpoint: &CheckpointRef,
    tasks: &[TaskId],
    k: u32,
    seed: u64,
    temperature: f64,
    max_tokens: u32,
    trials: u32,
    workers: Option<usize>,
) -> (Vec<SampleRecord>, u64, Option<GatewayError>) {
    let drawn = map_ordered(tasks, workers, |&task_id| {
        let request = SampleBatchRequest {
            checkpoint: checkpoint.clone(),
            task_id,
            k,
            temperature,
            max_tokens,
            seed,
        };
        backends.policy.draw_samples(&request)
    });
    let mut pending: Vec<Result<Candidate, SampleRecord>> = Vec::new();
    let mut first_error = None;
    for (&task_id, result) in tasks.iter().zip(drawn) {
        match result {
            Ok(cands) => pending.extend(cands.into_iter().map(Ok)),
            Err(e) => {
                pending.extend((0..k).map(|i| Err(failed_rollout(task_id, seed, i, &e, trials))));
                first_error.get_or_insert(e);
            }
        }
    }
    let evaluated = map_ordered(&pending, workers, |item| match item {
        Err(failed) => (failed.clone(), None),
        Ok(c) => {
            let request = EvalRequest {
                task_id: c.task_id,
                code: &c.code,
                trials,
            };
            match backends.evaluator.evaluate(&request) {
                Ok(outcome) => (c.clone().with_outcome(outcome), None),
                Err(e) => (
                    c.clone().with_outcome(EvalOutcome::compile_failure(
                        format!("evaluator error: {e}"),
                        trials,
                    )),
                    Some(e),
                ),
            }
        }
    });
    let mut failed = pending.iter().filter(|p| p.is_err()).count() as u64;
    let mut records = Vec::with_capacity(evaluated.len());
    for (record, err) in evaluated {
        if let Some(e) = err {
            failed += 1;
            first_error.get_or_insert(e);
        }
        records.push(record);
    }
    (records, failed, first_error)
}

/// Rollouts for one update plus the teacher tokens their signal cost.
fn build_rollouts(
    backends: &Backends,
    checkpoint: &CheckpointRef,
    records: &[SampleRecord],
    rule: UpdateRule,
    workers: Option<usize>,
) -> Result<(Vec<Rollout>, u64), GatewayError> {
    let usable: Vec<&SampleRecord> = records.iter().filter(|r| !r.code.is_empty()).collect();
    match rule {
        UpdateRule::Reward => Ok((
            usable
                .into_iter()
                .cloned()
                .map(Rollout::from_record)
                .collect(),
            0,
        )),
        UpdateRule::Sdpo { variant, beta } => {
            let mut best_correct: BTreeMap<TaskId, Vec<&SampleRecord>> = BTreeMap::new();
            for r in &usable {
                if r.outcome.correct {
                    best_correct.entry(r.task_id).or_default().push(r);
                }
            }
            for v in best_correct.values_mut() {
                v.sort_by(|a, b| {
                    b.outcome
                        .speedup
                        .total_cmp(&a.outcome.speedup)
                        .then(a.sample_index.cmp(&b.sample_index))
                });
            }
            let scored = map_ordered(&usable, workers, |r| {
                // A correct peer, never the student's own code.
                let peer = best_correct
                    .get(&r.task_id)
                    .and_then(|v| {
                        v.iter()
                            .find(|c| c.sample_index != r.sample_index || c.seed != r.seed)
                    })
                    .map(|c| c.code.as_str());
                let context =
                    build_teacher_context(&task_prompt(r.task_id), peer, Some(&r.outcome), variant)
                        .expect("feedback is always present");
                let teacher = backends
                    .policy
                    .token_logprobs(checkpoint, Some(&context), r)?;
                let student = backends.policy.token_logprobs(checkpoint, None, r)?;
                let adv = sdpo_advantages(&teacher, &student, beta, variant)
                    .map_err(|e| GatewayError::Protocol(e.to_string()))?;
                let teacher_tokens = estimate_tokens(&context) + u64::from(r.token_count);
                Ok::<_, GatewayError>((
                    Rollout {
                        record: (*r).clone(),
                        reward: adv.sum(),
                    },
                    teacher_tokens,
                ))
            });
            let mut rollouts = Vec::with_capacity(scored.len());
            let mut tokens = 0;
            for s in scored {
                let (r, t) = s?;
                tokens += t;
                rollouts.push(r);
            }
            Ok((rollouts, tokens))
        }
    }
}

/// Best-of-Adaptation over `config.steps` updates.
pub fn run_boa(
    config: &LoopConfig,
    checkpoint0: &CheckpointRef,
    backends: &Backends,
) -> Result<BoaRun, AdaptationError> {
    run_loop(config, checkpoint0, backends, None)
}

/// As [`run_boa`], halting after `patience` consecutive steps below the best.
pub fn run_boa_early_stop(
    config: &LoopConfig,
    checkpoint0: &CheckpointRef,
    backends: &Backends,
    patience: u32,
) -> Result<BoaRun, AdaptationError> {
    if patience < 1 {
        return Err(AdaptationError::BadPatience);
    }
    run_loop(config, checkpoint0, backends, Some(patience))
}

fn run_loop(
    config: &LoopConfig,
    checkpoint0: &CheckpointRef,
    backends: &Backends,
    patience: Option<u32>,
) -> Result<BoaRun, AdaptationError> {
    if config.steps < 1 {
        return Err(AdaptationError::NoSteps);
    }
    let started = crate::clock::Stopwatch::start();
    let mut ledger = BudgetLedger::default();
    let mut trajectory = Vec::with_capacity(config.steps as usize + 1);
    let mut all_records = Vec::with_capacity(config.steps as usize + 1);
    let mut first_error: Option<GatewayError> = None;
    let mut current = checkpoint0.clone();
    let mut stopped_early = false;

    for step in 0..=config.steps {
        let (records, failed, err) = collect_batch(
            backends,
            &current,
            &config.tasks,
            config.k,
            step_seed(config.seed, step),
            config.temperature,
            config.max_tokens,
            config.trials,
            config.workers,
        );
        if let Some(e) = err {
            first_error.get_or_insert(e);
        }
        ledger.add_records(&records);
        let mut adapt_error = None;
        if step > 0 {
            let update =
                build_rollouts(backends, &current, &records, config.update, config.workers)
                    .and_then(|(rollouts, teacher_tokens)| {
                        ledger.teacher_tokens += teacher_tokens;
                        backends
                            .policy
                            .adapt(&current, &rollouts, config.learning_rate)
                    });
            match update {
                Ok(out) => current = out.new_checkpoint,
                Err(e) => {
                    adapt_error = Some(e.to_string());
                    first_error.get_or_insert(e);
                }
            }
        }
        let (aggregate, per_task) = score_batch(&records);
        trajectory.push(TrajectoryStep {
            step,
            checkpoint: current.clone(),
            cumulative_rollouts: ledger.rollouts,
            aggregate_fast1: aggregate,
            per_task_fast1: per_task,
            failed_rollouts: failed,
            adapt_error,
        });
        all_records.push(records);
        if let Some(p) = patience {
            if step < config.steps {
                let scores: Vec<f64> = trajectory.iter().map(|t| t.aggregate_fast1).collect();
                if halted(&scores, p) {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let scores: Vec<f64> = trajectory.iter().map(|s| s.aggregate_fast1).collect();
    let best = boa_select(&scores).expect("step 0 always runs");
    ledger.wall_clock_ms = started.elapsed_ms();
    Ok(BoaRun {
        selected: trajectory[best].checkpoint.clone(),
        selected_step: trajectory[best].step,
        trajectory,
        records: all_records,
        ledger,
        stopped_early,
        first_error,
    })
}

/// True when the last `patience` scores all sit below the best before them.
fn halted(scores: &[f64], patience: u32) -> bool {
    let p = patience as usize;
    if scores.len() <= p {
        return false;
    }
    let (head, tail) = scores.split_at(scores.len() - p);
    let best = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    tail.iter().all(|&s| s < best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub checkpoint_id: String,
    pub per_task_fast1: BTreeMap<TaskId, f64>,
    pub aggregate_fast1: f64,
    pub records: Vec<SampleRecord>,
    pub ledger: BudgetLedger,
}

/// Fast-1 of `k` fresh samples per evaluation task from `adapted`, which must
/// not have been adapted on any of them.
#[allow(clippy::too_many_arguments)]
pub fn cross_subset_transfer(
    adapted: &CheckpointRef,
    eval_tasks: &[TaskId],
    k: u32,
    seed: u64,
    temperature: f64,
    max_tokens: u32,
    trials: u32,
    backends: &Backends,
) -> Result<TransferReport, AdaptationError> {
    let overlap: Vec<TaskId> = eval_tasks
        .iter()
        .copied()
        .filter(|t| adapted.adapted_on.contains(t))
        .collect();
    if !overlap.is_empty() {
        return Err(AdaptationError::OverlapDetected(overlap));
    }
    let (records, _, err) = collect_batch(
        backends,
        adapted,
        eval_tasks,
        k,
        seed,
        temperature,
        max_tokens,
        trials,
        None,
    );
    if let Some(e) = err {
        return Err(e.into());
    }
    let (aggregate, per_task) = score_batch(&records);
    let mut ledger = BudgetLedger::default();
    ledger.add_records(&records);
    Ok(TransferReport {
        checkpoint_id: adapted.id.clone(),
        per_task_fast1: per_task,
        aggregate_fast1: aggregate,
        records,
        ledger,
    })
}
