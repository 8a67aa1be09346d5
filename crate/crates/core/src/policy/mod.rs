//! Sampling, NLL scoring and adaptation over policy checkpoints.
//!
//! Backends implement [`Policy`]. [`PolicyGateway`] wraps any backend and
//! serializes `adapt` calls per lineage, so two loops that share a root never
//! interleave their updates.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;
use crate::evaluator::compute_reward;
use crate::model::{BackendKind, Candidate, CheckpointRef, SampleRecord, TaskId};

pub mod remote;
pub mod replay;
pub mod scenario;
pub mod synthetic;

pub use remote::RemotePolicy;
pub use replay::ReplayPolicy;
pub use scenario::{Archetype, Scenario, TaskProfile};
pub use synthetic::SyntheticPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatchRequest {
    pub checkpoint: CheckpointRef,
    pub task_id: TaskId,
    #[serde(rename = "K")]
    pub k: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl SampleBatchRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.k == 0 {
            return Err(GatewayError::InvalidRequest("K must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// An evaluated sample paired with the scalar signal the update should use.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub record: SampleRecord,
    pub reward: f64,
}

impl Rollout {
    /// Rollout rewarded by its execution outcome.
    pub fn from_record(record: SampleRecord) -> Self {
        let reward = compute_reward(&record.outcome);
        Self { record, reward }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub new_checkpoint: CheckpointRef,
    pub rollouts_consumed: u64,
    pub student_tokens: u64,
}

pub trait Policy: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Checkpoint a campaign starts from when it names `id`.
    fn root(&self, id: &str) -> Result<CheckpointRef, GatewayError>;

    /// Exactly `K` candidates with `sample_index` 0..K.
    fn draw_samples(&self, request: &SampleBatchRequest) -> Result<Vec<Candidate>, GatewayError>;

    /// Negative log-likelihood of a fixed sample under `checkpoint`.
    fn score_nll(
        &self,
        checkpoint: &CheckpointRef,
        sample: &SampleRecord,
    ) -> Result<f64, GatewayError>;

    /// Per-token log-probabilities of `sample`'s tokens under `checkpoint`,
    /// conditioned on `context` (the sampling prompt when `None`).
    fn token_logprobs(
        &self,
        checkpoint: &CheckpointRef,
        context: Option<&str>,
        sample: &SampleRecord,
    ) -> Result<Vec<f64>, GatewayError>;

    /// One update on `rollouts`. Callers go through [`PolicyGateway::adapt`].
    fn adapt_unlocked(
        &self,
        checkpoint: &CheckpointRef,
        rollouts: &[Rollout],
        learning_rate: f64,
    ) -> Result<AdaptOutcome, GatewayError>;
}

/// Shared handle to a backend with one writer per lineage.
#[derive(Clone)]
pub struct PolicyGateway {
    inner: Arc<dyn Policy>,
    lineage_locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl PolicyGateway {
    pub fn new(inner: Arc<dyn Policy>) -> Self {
        Self {
            inner,
            lineage_locks: Arc::new(Mutex::new(HashMap::new())),
        }
    }

    pub fn backend(&self) -> &dyn Policy {
        self.inner.as_ref()
    }

    pub fn kind(&self) -> BackendKind {
        self.inner.kind()
    }

    pub fn root(&self, id: &str) -> Result<CheckpointRef, GatewayError> {
        self.inner.root(id)
    }

    pub fn draw_samples(
        &self,
        request: &SampleBatchRequest,
    ) -> Result<Vec<Candidate>, GatewayError> {
        request.validate()?;
        let out = self.inner.draw_samples(request)?;
        if out.len() != request.k as usize
            || out
                .iter()
                .enumerate()
                .any(|(i, c)| c.sample_index as usize != i)
        {
            return Err(GatewayError::Protocol(format!(
                "expected {} samples indexed 0..{}, got {}",
                request.k,
                request.k,
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn score_nll(
        &self,
        checkpoint: &CheckpointRef,
        sample: &SampleRecord,
    ) -> Result<f64, GatewayError> {
        self.inner.score_nll(checkpoint, sample)
    }

    pub fn token_logprobs(
        &self,
        checkpoint: &CheckpointRef,
        context: Option<&str>,
        sample: &SampleRecord,
    ) -> Result<Vec<f64>, GatewayError> {
        self.inner.token_logprobs(checkpoint, context, sample)
    }

    pub fn adapt(
        &self,
        checkpoint: &CheckpointRef,
        rollouts: &[Rollout],
        learning_rate: f64,
    ) -> Result<AdaptOutcome, GatewayError> {
        if rollouts.is_empty() {
            return Err(GatewayError::EmptyRollouts);
        }
        if !(learning_rate >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "learning_rate must be >= 0".into(),
            ));
        }
        let lock = {
            let mut locks = self.lineage_locks.lock().unwrap_or_else(|e| e.into_inner());
            Arc::clone(
                locks
                    .entry(checkpoint.lineage_root().to_string())
                    .or_default(),
            )
        };
        let _writer = lock.lock().unwrap_or_else(|e| e.into_inner());
        self.inner
            .adapt_unlocked(checkpoint, rollouts, learning_rate)
    }
}

/// Prompt text a campaign hands to the teacher for `task_id`.
pub fn task_prompt(task_id: TaskId) -> String {
    format!(
        "Task {task_id}: write a CUDA kernel that computes the same output as the reference \
         implementation for problem {task_id} and runs faster than it."
    )
}

/// Splits a sequence log-probability over its tokens with fixed, positive
/// weights derived from `key`; the parts sum to `total`.
pub fn split_logprob(total: f64, tokens: u32, key: u64) -> Vec<f64> {
    let n = tokens.max(1) as usize;
    let weights: Vec<f64> = (0..n)
        .map(|i| 0.5 + crate::hash::unit_f64(crate::hash::mix(&[key, i as u64])))
        .collect();
    let sum: f64 = weights.iter().sum();
    weights.iter().map(|w| total * w / sum).collect()
}
