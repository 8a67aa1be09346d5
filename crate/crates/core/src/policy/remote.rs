//! Client for a remote sampling/training service.
//!
//! Endpoints (`POST`, JSON bodies): `sample`, `score`, `score_tokens`, `adapt`
//! and `poll`. `adapt` returns a job handle that is polled until the service
//! reports the child checkpoint.

use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{AdaptOutcome, Policy, Rollout, SampleBatchRequest};
use crate::error::GatewayError;
use crate::model::{BackendKind, Candidate, CheckpointRef, SampleRecord};
use crate::transport::{InFlightLimit, Transport, TransportError};

pub struct RemotePolicy {
    transport: Arc<dyn Transport>,
    limit: InFlightLimit,
    timeout: Duration,
    poll_interval: Duration,
    max_polls: u32,
}

#[derive(Deserialize)]
struct WireSample {
    code: String,
    token_count: u32,
    total_logprob: f64,
}

#[derive(Deserialize)]
struct SampleReply {
    samples: Vec<WireSample>,
}

impl RemotePolicy {
    pub fn new(transport: Arc<dyn Transport>, timeout: Duration, max_in_flight: usize) -> Self {
        Self {
            transport,
            limit: InFlightLimit::new(max_in_flight),
            timeout,
            poll_interval: Duration::from_millis(500),
            max_polls: 100_000,
        }
    }

    pub fn with_polling(mut self, interval: Duration, max_polls: u32) -> Self {
        self.poll_interval = interval;
        self.max_polls = max_polls.max(1);
        self
    }

    fn call(
        &self,
        path: &str,
        body: Value,
        checkpoint: Option<&str>,
    ) -> Result<Value, GatewayError> {
        let reply = {
            let _permit = self.limit.acquire();
            self.transport.post(path, &body, self.timeout)
        };
        let value = reply.map_err(|e| match e {
            TransportError::Timeout => {
                GatewayError::BackendUnreachable(format!("{path}: timed out"))
            }
            TransportError::Unreachable(m) => GatewayError::BackendUnreachable(m),
            TransportError::Protocol(m) => GatewayError::Protocol(m),
        })?;
        match value.get("error").and_then(Value::as_str) {
            None => Ok(value),
            Some("unknown_checkpoint") => Err(GatewayError::UnknownCheckpoint(
                checkpoint.unwrap_or_default().to_string(),
            )),
            Some(other) => Err(GatewayError::Protocol(format!("{path}: {other}"))),
        }
    }

    fn field<T: for<'de> Deserialize<'de>>(value: Value, path: &str) -> Result<T, GatewayError> {
        serde_json::from_value(value).map_err(|e| GatewayError::Protocol(format!("{path}: {e}")))
    }
}

impl Policy for RemotePolicy {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn root(&self, id: &str) -> Result<CheckpointRef, GatewayError> {
        Ok(CheckpointRef::root(id, BackendKind::Remote))
    }

    fn draw_samples(&self, request: &SampleBatchRequest) -> Result<Vec<Candidate>, GatewayError> {
        let ck = request.checkpoint.id.as_str();
        let body = json!({
            "checkpoint_id": ck,
            "prompt_id": request.task_id,
            "K": request.k,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        });
        let reply: SampleReply = Self::field(self.call("sample", body, Some(ck))?, "sample")?;
        Ok(reply
            .samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| Candidate {
                task_id: request.task_id,
                seed: request.seed,
                sample_index: i as u32,
                code: s.code,
                token_count: s.token_count.max(1),
                total_logprob: s.total_logprob.min(0.0),
            })
            .collect())
    }

    fn score_nll(
        &self,
        checkpoint: &CheckpointRef,
        sample: &SampleRecord,
    ) -> Result<f64, GatewayError> {
        #[derive(Deserialize)]
        struct Reply {
            nll: f64,
        }
        let ck = checkpoint.id.as_str();
        let body = json!({ "checkpoint_id": ck, "code": sample.code });
        let r: Reply = Self::field(self.call("score", body, Some(ck))?, "score")?;
        if r.nll < 0.0 || !r.nll.is_finite() {
            return Err(GatewayError::Protocol(format!(
                "score: invalid nll {}",
                r.nll
            )));
        }
        Ok(r.nll)
    }

    fn token_logprobs(
        &self,
        checkpoint: &CheckpointRef,
        context: Option<&str>,
        sample: &SampleRecord,
    ) -> Result<Vec<f64>, GatewayError> {
        #[derive(Deserialize)]
        struct Reply {
            logprobs: Vec<f64>,
        }
        let ck = checkpoint.id.as_str();
        let body = json!({
            "checkpoint_id": ck,
            "prompt_id": sample.task_id,
            "context": context,
            "code": sample.code,
        });
        let r: Reply = Self::field(self.call("score_tokens", body, Some(ck))?, "score_tokens")?;
        if r.logprobs.len() != sample.token_count as usize {
            return Err(GatewayError::Protocol(format!(
                "score_tokens: {} logprobs for {} tokens",
                r.logprobs.len(),
                sample.token_count
            )));
        }
        Ok(r.logprobs)
    }

    fn adapt_unlocked(
        &self,
        checkpoint: &CheckpointRef,
        rollouts: &[Rollout],
        learning_rate: f64,
    ) -> Result<AdaptOutcome, GatewayError> {
        #[derive(Deserialize)]
        struct Job {
            job_id: String,
        }
        #[derive(Deserialize)]
        struct Poll {
            #[serde(default)]
            new_checkpoint_id: Option<String>,
        }
        if rollouts.is_empty() {
            return Err(GatewayError::EmptyRollouts);
        }
        let ck = checkpoint.id.as_str();
        let wire: Vec<Value> = rollouts
            .iter()
            .map(|r| json!({ "code": r.record.code, "reward": r.reward }))
            .collect();
        let body = json!({ "checkpoint_id": ck, "rollouts": wire, "learning_rate": learning_rate });
        let job: Job = Self::field(self.call("adapt", body, Some(ck))?, "adapt")?;
        for attempt in 0..self.max_polls {
            if attempt > 0 {
                std::thread::sleep(self.poll_interval);
            }
            let p: Poll = Self::field(
                self.call("poll", json!({ "job_id": job.job_id }), Some(ck))?,
                "poll",
            )?;
            if let Some(id) = p.new_checkpoint_id {
                return Ok(AdaptOutcome {
                    new_checkpoint: checkpoint.child(id, rollouts.iter().map(|r| r.record.task_id)),
                    rollouts_consumed: rollouts.len() as u64,
                    student_tokens: rollouts
                        .iter()
                        .map(|r| u64::from(r.record.token_count))
                        .sum(),
                });
            }
        }
        Err(GatewayError::BackendUnreachable(format!(
            "adapt job {} still pending after {} polls",
            job.job_id, self.max_polls
        )))
    }
}
