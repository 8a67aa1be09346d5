//! Scripted backend that serves recorded samples, NLLs and adaptation edges.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use super::{split_logprob, AdaptOutcome, Policy, Rollout, SampleBatchRequest};
use crate::error::GatewayError;
use crate::hash::mix;
use crate::model::{BackendKind, Candidate, CheckpointRef, SampleRecord, TaskId};

type SampleKey = (String, TaskId, u64);
type NllKey = (String, TaskId, u64, u32);

#[derive(Default)]
pub struct ReplayPolicy {
    roots: BTreeSet<String>,
    checkpoints: BTreeSet<String>,
    samples: HashMap<SampleKey, Vec<Candidate>>,
    nll: HashMap<NllKey, f64>,
    children: HashMap<String, String>,
    adapt_calls: Mutex<Vec<String>>,
}

impl ReplayPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_root(mut self, id: &str) -> Self {
        self.roots.insert(id.to_string());
        self.checkpoints.insert(id.to_string());
        self
    }

    /// Recorded samples returned for `(checkpoint, task, seed)`.
    pub fn with_samples(
        mut self,
        checkpoint: &str,
        task_id: TaskId,
        seed: u64,
        samples: Vec<Candidate>,
    ) -> Self {
        self.checkpoints.insert(checkpoint.to_string());
        self.samples
            .insert((checkpoint.to_string(), task_id, seed), samples);
        self
    }

    pub fn with_nll(mut self, checkpoint: &str, sample: &SampleRecord, nll: f64) -> Self {
        self.checkpoints.insert(checkpoint.to_string());
        self.nll.insert(
            (
                checkpoint.to_string(),
                sample.task_id,
                sample.seed,
                sample.sample_index,
            ),
            nll,
        );
        self
    }

    /// `adapt` on `parent` yields `child`.
    pub fn with_child(mut self, parent: &str, child: &str) -> Self {
        self.checkpoints.insert(parent.to_string());
        self.checkpoints.insert(child.to_string());
        self.children.insert(parent.to_string(), child.to_string());
        self
    }

    /// Parents passed to `adapt`, in call order.
    pub fn adapt_calls(&self) -> Vec<String> {
        self.adapt_calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    fn known(&self, checkpoint: &CheckpointRef) -> Result<(), GatewayError> {
        if self.checkpoints.contains(&checkpoint.id) {
            Ok(())
        } else {
            Err(GatewayError::UnknownCheckpoint(checkpoint.id.clone()))
        }
    }
}

impl Policy for ReplayPolicy {
    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn root(&self, id: &str) -> Result<CheckpointRef, GatewayError> {
        if self.roots.contains(id) {
            Ok(CheckpointRef::root(id, BackendKind::Synthetic))
        } else {
            Err(GatewayError::UnknownCheckpoint(id.to_string()))
        }
    }

    fn draw_samples(&self, request: &SampleBatchRequest) -> Result<Vec<Candidate>, GatewayError> {
        self.known(&request.checkpoint)?;
        let key = (request.checkpoint.id.clone(), request.task_id, request.seed);
        let recorded = self
            .samples
            .get(&key)
            .ok_or(GatewayError::UnknownTask(request.task_id))?;
        if recorded.len() < request.k as usize {
            return Err(GatewayError::InvalidRequest(format!(
                "only {} recorded samples for task {}",
                recorded.len(),
                request.task_id
            )));
        }
        Ok(recorded[..request.k as usize].to_vec())
    }

    fn score_nll(
        &self,
        checkpoint: &CheckpointRef,
        sample: &SampleRecord,
    ) -> Result<f64, GatewayError> {
        self.known(checkpoint)?;
        self.nll
            .get(&(
                checkpoint.id.clone(),
                sample.task_id,
                sample.seed,
                sample.sample_index,
            ))
            .copied()
            .ok_or_else(|| {
                GatewayError::InvalidRequest(format!(
                    "no recorded NLL for {:?} under {}",
                    sample.key(),
                    checkpoint.id
                ))
            })
    }

    fn token_logprobs(
        &self,
        checkpoint: &CheckpointRef,
        _context: Option<&str>,
        sample: &SampleRecord,
    ) -> Result<Vec<f64>, GatewayError> {
        let nll = self.score_nll(checkpoint, sample)?;
        let key = mix(&[
            u64::from(sample.task_id),
            sample.seed,
            u64::from(sample.sample_index),
        ]);
        Ok(split_logprob(-nll, sample.token_count, key))
    }

    fn adapt_unlocked(
        &self,
        checkpoint: &CheckpointRef,
        rollouts: &[Rollout],
        _learning_rate: f64,
    ) -> Result<AdaptOutcome, GatewayError> {
        if rollouts.is_empty() {
            return Err(GatewayError::EmptyRollouts);
        }
        let child = self
            .children
            .get(&checkpoint.id)
            .ok_or_else(|| GatewayError::UnknownCheckpoint(checkpoint.id.clone()))?;
        self.adapt_calls
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(checkpoint.id.clone());
        Ok(AdaptOutcome {
            new_checkpoint: checkpoint
                .child(child.clone(), rollouts.iter().map(|r| r.record.task_id)),
            rollouts_consumed: rollouts.len() as u64,
            student_tokens: rollouts
                .iter()
                .map(|r| u64::from(r.record.token_count))
                .sum(),
        })
    }
}
