//! Test-time adaptation: Best-of-Adaptation loops, early stopping,
//! self-distillation advantages, budget parity and cross-subset transfer.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::GatewayError;
use crate::evaluator::{is_fast1, Evaluator};
use crate::model::{CampaignConfig, CheckpointRef, EvalOutcome, SampleRecord, TaskId};
use crate::policy::PolicyGateway;

mod runner;

pub use runner::{
    collect_batch, cross_subset_transfer, run_boa, run_boa_early_stop, step_seed, BoaRun,
    LoopConfig, TransferReport, UpdateRule,
};

/// The fixed closing line of every feedback teacher context.
pub const TEACHER_INSTRUCTION: &str = "Correctly solve the original question.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptationError {
    #[error("length mismatch: teacher {0} vs student {1}")]
    LengthMismatch(usize, usize),
    #[error("feedback context needs an execution outcome")]
    MissingFeedback,
    #[error("steps must be >= 1")]
    NoSteps,
    #[error("patience must be >= 1")]
    BadPatience,
    #[error("evaluation tasks overlap the adaptation tasks: {0:?}")]
    OverlapDetected(Vec<TaskId>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Both policy and evaluator behind one handle.
#[derive(Clone)]
pub struct Backends {
    pub policy: PolicyGateway,
    pub evaluator: Arc<dyn Evaluator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: u32,
    /// `theta_s`: the checkpoint this step's score is attributed to.
    pub checkpoint: CheckpointRef,
    pub cumulative_rollouts: u64,
    pub aggregate_fast1: f64,
    pub per_task_fast1: BTreeMap<TaskId, f64>,
    /// Rollouts lost to backend errors (scored as failures).
    #[serde(default)]
    pub failed_rollouts: u64,
    /// Set when the update after this step's sampling failed.
    #[serde(default)]
    pub adapt_error: Option<String>,
}

/// Fast-1 per task and over the whole batch.
pub fn score_batch(records: &[SampleRecord]) -> (f64, BTreeMap<TaskId, f64>) {
    let mut per: BTreeMap<TaskId, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = per.entry(r.task_id).or_default();
        e.0 += usize::from(is_fast1(&r.outcome));
        e.1 += 1;
    }
    let total: usize = per.values().map(|v| v.1).sum();
    let fast: usize = per.values().map(|v| v.0).sum();
    let aggregate = if total == 0 {
        0.0
    } else {
        fast as f64 / total as f64
    };
    (
        aggregate,
        per.into_iter()
            .map(|(t, (f, n))| (t, f as f64 / n as f64))
            .collect(),
    )
}

/// Index of the best score; ties go to the earliest step.
pub fn boa_select(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Number of trajectory entries (step 0 included) an early-stopping run
/// executes: it halts once `patience` consecutive steps score below the
/// running best.
pub fn early_stop_len(scores: &[f64], patience: u32) -> usize {
    let Some(&first) = scores.first() else {
        return 0;
    };
    let mut best = first;
    let mut streak = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < best {
            streak += 1;
            if streak >= patience {
                return i + 1;
            }
        } else {
            streak = 0;
            best = s;
        }
    }
    scores.len()
}

/// Compute spent by one campaign arm.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub rollouts: u64,
    pub student_tokens: u64,
    pub teacher_tokens: u64,
    pub extra_timing_evals: u64,
    pub wall_clock_ms: u64,
}

impl BudgetLedger {
    pub fn total_tokens(&self) -> u64 {
        self.student_tokens + self.teacher_tokens
    }

    pub fn add_records(&mut self, records: &[SampleRecord]) {
        self.rollouts += records.len() as u64;
        self.student_tokens += records
            .iter()
            .map(|r| u64::from(r.token_count))
            .sum::<u64>();
    }

    pub fn absorb(&mut self, other: &BudgetLedger) {
        self.rollouts += other.rollouts;
        self.student_tokens += other.student_tokens;
        self.teacher_tokens += other.teacher_tokens;
        self.extra_timing_evals += other.extra_timing_evals;
        self.wall_clock_ms += other.wall_clock_ms;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpoVariant {
    Feedback,
    PromptOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpoAdvantages {
    pub beta: f64,
    pub per_token: Vec<f64>,
    pub variant: SdpoVariant,
}

impl SdpoAdvantages {
    pub fn sum(&self) -> f64 {
        self.per_token.iter().sum()
    }
}

/// `A_t = beta * (teacher_t - student_t)` on the student's own tokens.
pub fn sdpo_advantages(
    teacher_logprobs: &[f64],
    student_logprobs: &[f64],
    beta: f64,
    variant: SdpoVariant,
) -> Result<SdpoAdvantages, AdaptationError> {
    if teacher_logprobs.len() != student_logprobs.len() || teacher_logprobs.is_empty() {
        return Err(AdaptationError::LengthMismatch(
            teacher_logprobs.len(),
            student_logprobs.len(),
        ));
    }
    Ok(SdpoAdvantages {
        beta,
        per_token: teacher_logprobs
            .iter()
            .zip(student_logprobs)
            .map(|(t, s)| beta * (t - s))
            .collect(),
        variant,
    })
}

/// Renders an execution outcome as the teacher's feedback block.
pub fn render_feedback(outcome: &EvalOutcome) -> String {
    format!(
        "Execution feedback:\ncompiled: {}\ncorrect: {}\nspeedup: {}\nruntime: {}\nerror_trace: {}",
        outcome.compiled,
        outcome.correct,
        outcome.speedup,
        outcome.runtime,
        outcome.error_trace.as_deref().unwrap_or("none")
    )
}

/// Teacher context for self-distillation.
///
/// The feedback variant stacks the task prompt, an optional correct solution
/// from the same batch, the execution feedback, and [`TEACHER_INSTRUCTION`].
/// The student's own code is never part of it. The prompt-only variant is the
/// prompt itself.
pub fn build_teacher_context(
    task_prompt: &str,
    correct_solution: Option<&str>,
    feedback: Option<&EvalOutcome>,
    variant: SdpoVariant,
) -> Result<String, AdaptationError> {
    match variant {
        SdpoVariant::PromptOnly => Ok(task_prompt.to_string()),
        SdpoVariant::Feedback => {
            let feedback = feedback.ok_or(AdaptationError::MissingFeedback)?;
            let mut sections = vec![task_prompt.to_string()];
            if let Some(code) = correct_solution {
                sections.push(format!("Correct solution from the same batch:\n{code}"));
            }
            sections.push(render_feedback(feedback));
            sections.push(TEACHER_INSTRUCTION.to_string());
            Ok(sections.join("\n\n"))
        }
    }
}

/// Rough token count of plain text.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetViolation {
    pub reasons: Vec<String>,
    /// `plan_b.rollout_budget - plan_a.rollout_budget`.
    pub rollout_delta: i64,
}

/// Two plans are comparable only when rollout budget, sampling temperature,
/// token cap and starting checkpoint all match.
pub fn enforce_equal_budget(
    plan_a: &CampaignConfig,
    plan_b: &CampaignConfig,
) -> Result<(), BudgetViolation> {
    let mut reasons = Vec::new();
    let delta = plan_b.rollout_budget as i64 - plan_a.rollout_budget as i64;
    if delta != 0 {
        reasons.push(format!(
            "rollout budget {} vs {} (delta {delta})",
            plan_a.rollout_budget, plan_b.rollout_budget
        ));
    }
    if plan_a.temperature != plan_b.temperature {
        reasons.push(format!(
            "temperature {} vs {}",
            plan_a.temperature, plan_b.temperature
        ));
    }
    if plan_a.max_tokens != plan_b.max_tokens {
        reasons.push(format!(
            "max_tokens {} vs {}",
            plan_a.max_tokens, plan_b.max_tokens
        ));
    }
    if plan_a.checkpoint != plan_b.checkpoint {
        reasons.push(format!(
            "checkpoint {} vs {}",
            plan_a.checkpoint, plan_b.checkpoint
        ));
    }
    if reasons.is_empty() {
        Ok(())
    } else {
        Err(BudgetViolation {
            reasons,
            rollout_delta: delta,
        })
    }
}
