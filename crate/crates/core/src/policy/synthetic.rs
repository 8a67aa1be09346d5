//! A desk-scale policy whose adaptation sharpens toward early-success modes.
//!
//! Each task's distribution is a mixture of [`Archetype`]s. A sample picks an
//! archetype by weight and a typicality latent `z ~ N(shift, 1)`; its sequence
//! log-probability is `min(mean_logprob + spread * z, 0)`. The archetype and
//! latent travel in the code header, which is how the synthetic evaluator and
//! NLL scoring see them.
//!
//! `adapt` applies exponential weights per task: archetypes holding at least
//! `support_fraction` of the task's batch and beating the batch mean reward
//! are scaled by `exp(eta * (mean_reward - batch_mean))`; every other weight is
//! kept as is before renormalising, so rarely-seen archetypes can only lose
//! mass. Every positive-`eta` update also contracts all spreads and shifts the
//! latent toward the mode, on every task, which is what hurts transfer.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scenario::{tail_below_mode, Scenario};
use super::{split_logprob, AdaptOutcome, Policy, Rollout, SampleBatchRequest};
use crate::error::GatewayError;
use crate::evaluator::tag::{ArchetypeClass, KernelTag};
use crate::hash::{mix, mix_str};
use crate::model::{BackendKind, Candidate, CheckpointRef, SampleRecord, TaskId};

/// Dynamic part of one archetype.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchState {
    pub weight: f64,
    pub mean_logprob: f64,
    pub spread: f64,
    pub shift: f64,
}

/// Mixture state of one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyState {
    default: Vec<ArchState>,
    tasks: BTreeMap<TaskId, Vec<ArchState>>,
}

fn initial(profile: &super::TaskProfile) -> Vec<ArchState> {
    profile
        .archetypes
        .iter()
        .map(|a| ArchState {
            weight: a.weight,
            mean_logprob: a.mean_logprob,
            spread: a.logprob_spread,
            shift: 0.0,
        })
        .collect()
}

impl PolicyState {
    fn from_scenario(s: &Scenario) -> Self {
        Self {
            default: initial(&s.default_task),
            tasks: s.tasks.iter().map(|(t, p)| (*t, initial(p))).collect(),
        }
    }

    pub fn archetypes(&self, task_id: TaskId) -> &[ArchState] {
        self.tasks.get(&task_id).unwrap_or(&self.default)
    }

    fn archetypes_mut(&mut self, task_id: TaskId) -> &mut Vec<ArchState> {
        let default = &self.default;
        self.tasks.entry(task_id).or_insert_with(|| default.clone())
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut ArchState> {
        self.default
            .iter_mut()
            .chain(self.tasks.values_mut().flat_map(|v| v.iter_mut()))
    }
}

pub struct SyntheticPolicy {
    scenario: Scenario,
    root_id: String,
    states: RwLock<HashMap<String, Arc<PolicyState>>>,
}

impl SyntheticPolicy {
    pub fn new(scenario: Scenario, root_id: impl Into<String>) -> Self {
        let root_id = root_id.into();
        let mut states = HashMap::new();
        states.insert(
            root_id.clone(),
            Arc::new(PolicyState::from_scenario(&scenario)),
        );
        Self {
            scenario,
            root_id,
            states: RwLock::new(states),
        }
    }

    pub fn stock() -> Self {
        Self::new(Scenario::stock(), "base")
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self, checkpoint: &CheckpointRef) -> Result<Arc<PolicyState>, GatewayError> {
        self.states
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&checkpoint.id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownCheckpoint(checkpoint.id.clone()))
    }

    /// Probability mass of `class` archetypes for `task_id` at `checkpoint`.
    pub fn class_mass(
        &self,
        checkpoint: &CheckpointRef,
        task_id: TaskId,
        class: ArchetypeClass,
    ) -> Result<f64, GatewayError> {
        let state = self.state(checkpoint)?;
        let profile = self.scenario.profile(task_id);
        Ok(state
            .archetypes(task_id)
            .iter()
            .zip(&profile.archetypes)
            .filter(|(_, a)| a.class == class)
            .map(|(s, _)| s.weight)
            .sum())
    }

    fn nll(
        &self,
        state: &PolicyState,
        task_id: TaskId,
        tag: &KernelTag,
    ) -> Result<f64, GatewayError> {
        let a = state.archetypes(task_id).get(tag.arch).ok_or_else(|| {
            GatewayError::InvalidRequest(format!(
                "archetype {} unknown for task {task_id}",
                tag.arch
            ))
        })?;
        Ok(-(a.mean_logprob + a.spread * tag.z).min(0.0))
    }

    fn sample_one(
        &self,
        state: &PolicyState,
        checkpoint: &CheckpointRef,
        request: &SampleBatchRequest,
        index: u32,
    ) -> Candidate {
        let task = request.task_id;
        let profile = self.scenario.profile(task);
        let arch_states = state.archetypes(task);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[
            mix_str(&checkpoint.id),
            u64::from(task),
            request.seed,
            u64::from(index),
        ]));

        let arch = if request.temperature == 0.0 {
            arch_states
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.weight.total_cmp(&b.1.weight).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i)
        } else {
            let total: f64 = arch_states.iter().map(|a| a.weight).sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = arch_states.len() - 1;
            for (i, a) in arch_states.iter().enumerate() {
                if u < a.weight {
                    pick = i;
                    break;
                }
                u -= a.weight;
            }
            pick
        };
        let st = &arch_states[arch];
        let params = &profile.archetypes[arch];
        // Temperature 0.25 is the reference scale of the latent.
        let scale = (request.temperature / 0.25).sqrt();
        let z = st.shift + scale * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
        let total_logprob = (st.mean_logprob + st.spread * z).min(0.0);
        let len_noise: f64 = Normal::new(0.0, 0.05)
            .expect("length noise")
            .sample(&mut rng);
        let token_count = (params.mean_tokens * len_noise.exp())
            .round()
            .clamp(1.0, f64::from(request.max_tokens)) as u32;
        let tag = KernelTag {
            arch,
            class: params.class,
            compile_rate: params.compile_rate,
            correct_rate: params.correct_rate,
            speedup_median: params.speedup_median,
            speedup_dispersion: params.speedup_dispersion,
            link: self.scenario.link,
            z,
            nonce: rng.next_u64(),
        };
        Candidate {
            task_id: task,
            seed: request.seed,
            sample_index: index,
            code: format!("{tag}\n{}", kernel_body(task, params.class)),
            token_count,
            total_logprob,
        }
    }
}

fn kernel_body(task: TaskId, class: ArchetypeClass) -> String {
    let inner = match class {
        ArchetypeClass::NaiveMode => "    if (i < n) out[i] = op(a[i], b[i]);",
        ArchetypeClass::ExpertTail => {
            "    __shared__ float tile[256];\n    tile[threadIdx.x] = i < n ? a[i] : 0.f;\n    __syncthreads();\n    if (i < n) out[i] = fused_op(tile[threadIdx.x], b[i]);"
        }
        ArchetypeClass::Broken => "    out[i] = op(a[i], b[i + 1]);",
    };
    format!(
        "__global__ void task{task}_kernel(const float* a, const float* b, float* out, int n) {{\n    int i = blockIdx.x * blockDim.x + threadIdx.x;\n{inner}\n}}\n"
    )
}

fn parse_context_signal(context: &str) -> Option<f64> {
    let mut correct = None;
    let mut speedup = None;
    for line in context.lines() {
        if let Some(v) = line.strip_prefix("correct: ") {
            correct = v.trim().parse::<bool>().ok();
        } else if let Some(v) = line.strip_prefix("speedup: ") {
            speedup = v.trim().trim_end_matches('x').parse::<f64>().ok();
        }
    }
    match (correct?, speedup) {
        (true, Some(s)) if s > 0.0 => Some(s.ln()),
        (true, _) => Some(0.0),
        (false, _) => Some(-std::f64::consts::LN_2),
    }
}

impl Policy for SyntheticPolicy {
    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn root(&self, id: &str) -> Result<CheckpointRef, GatewayError> {
        if id == self.root_id {
            Ok(CheckpointRef::root(id, BackendKind::Synthetic))
        } else {
            Err(GatewayError::UnknownCheckpoint(id.to_string()))
        }
    }

    fn draw_samples(&self, request: &SampleBatchRequest) -> Result<Vec<Candidate>, GatewayError> {
        let state = self.state(&request.checkpoint)?;
        Ok((0..request.k)
            .map(|i| self.sample_one(&state, &request.checkpoint, request, i))
            .collect())
    }

    fn score_nll(
        &self,
        checkpoint: &CheckpointRef,
        sample: &SampleRecord,
    ) -> Result<f64, GatewayError> {
        let state = self.state(checkpoint)?;
        let tag = KernelTag::parse(&sample.code)
            .ok_or_else(|| GatewayError::InvalidRequest("sample has no synthetic header".into()))?;
        self.nll(&state, sample.task_id, &tag)
    }

    /// The teacher reads the execution feedback in its context and tilts each
    /// token by `ln(speedup) / tokens` for correct code, `-ln 2 / tokens` for
    /// incorrect code. Without feedback it agrees with the student.
    fn token_logprobs(
        &self,
        checkpoint: &CheckpointRef,
        context: Option<&str>,
        sample: &SampleRecord,
    ) -> Result<Vec<f64>, GatewayError> {
        let nll = self.score_nll(checkpoint, sample)?;
        let tag = KernelTag::parse(&sample.code).expect("parsed in score_nll");
        let mut per_token = split_logprob(
            -nll,
            sample.token_count,
            mix(&[tag.nonce, u64::from(sample.task_id)]),
        );
        if let Some(signal) = context.and_then(parse_context_signal) {
            let tilt = signal / per_token.len() as f64;
            for lp in &mut per_token {
                *lp = (*lp + tilt).min(0.0);
            }
        }
        Ok(per_token)
    }

    fn adapt_unlocked(
        &self,
        checkpoint: &CheckpointRef,
        rollouts: &[Rollout],
        learning_rate: f64,
    ) -> Result<AdaptOutcome, GatewayError> {
        if rollouts.is_empty() {
            return Err(GatewayError::EmptyRollouts);
        }
        if let Some(bad) = rollouts.iter().find(|r| !r.reward.is_finite()) {
            return Err(GatewayError::UnevaluatedRollout(bad.record.task_id));
        }
        let parent = self.state(checkpoint)?;
        let mut next = (*parent).clone();
        let eta = learning_rate * self.scenario.lr_gain;

        let mut by_task: BTreeMap<TaskId, Vec<(usize, f64)>> = BTreeMap::new();
        for r in rollouts {
            let entry = by_task.entry(r.record.task_id).or_default();
            if let Some(tag) = KernelTag::parse(&r.record.code) {
                entry.push((tag.arch, r.reward));
            }
        }

        if eta > 0.0 {
            for (&task, items) in &by_task {
                if items.is_empty() {
                    continue;
                }
                let classes: Vec<ArchetypeClass> = self
                    .scenario
                    .profile(task)
                    .archetypes
                    .iter()
                    .map(|a| a.class)
                    .collect();
                let arch = next.archetypes_mut(task);
                let mut count = vec![0usize; arch.len()];
                let mut sum = vec![0.0; arch.len()];
                for &(a, reward) in items {
                    if a < arch.len() {
                        count[a] += 1;
                        sum[a] += reward;
                    }
                }
                let need =
                    ((self.scenario.support_fraction * items.len() as f64).ceil() as usize).max(1);
                let supported: Vec<usize> = (0..arch.len()).filter(|&a| count[a] >= need).collect();
                let supported_weight: f64 = supported.iter().map(|&a| arch[a].weight).sum();
                if supported.is_empty() || supported_weight <= 0.0 {
                    continue;
                }
                let mean = |a: usize| sum[a] / count[a] as f64;
                let baseline = items.iter().map(|&(_, r)| r).sum::<f64>() / items.len() as f64;
                let old: Vec<f64> = arch.iter().map(|s| s.weight).collect();
                let mut raw = old.clone();
                for &a in &supported {
                    raw[a] *= (eta * (mean(a) - baseline).max(0.0)).exp();
                }
                let total: f64 = raw.iter().sum();
                for (a, s) in arch.iter_mut().enumerate() {
                    s.weight = raw[a] / total;
                    if old[a] > 0.0 && s.weight > 0.0 {
                        s.mean_logprob = (s.mean_logprob + (s.weight / old[a]).ln()).min(0.0);
                    }
                }
                // Keep the tail strictly below the mode.
                let lowest_mode = arch
                    .iter()
                    .zip(&classes)
                    .filter(|(_, c)| **c == ArchetypeClass::NaiveMode)
                    .map(|(s, _)| s.mean_logprob)
                    .fold(f64::INFINITY, f64::min);
                if !tail_below_mode(arch.iter().zip(&classes).map(|(s, c)| (*c, s.mean_logprob))) {
                    for (s, c) in arch.iter_mut().zip(&classes) {
                        if *c == ArchetypeClass::ExpertTail {
                            s.mean_logprob = s.mean_logprob.min(lowest_mode - 1.0);
                        }
                    }
                }
            }
            let factor = self.scenario.sharpening_factor;
            let drift = self.scenario.mode_drift;
            for s in next.all_mut() {
                s.spread *= factor;
                s.shift += drift;
            }
        }

        let digest = rollouts.iter().fold(0u64, |acc, r| {
            mix(&[
                acc,
                u64::from(r.record.task_id),
                r.record.seed,
                u64::from(r.record.sample_index),
                r.reward.to_bits(),
            ])
        });
        let hash = mix(&[mix_str(&checkpoint.id), digest, learning_rate.to_bits()]);
        let child_id = format!(
            "{}@s{}-{:016x}",
            checkpoint.lineage_root(),
            checkpoint.step() + 1,
            hash
        );
        self.states
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(child_id.clone(), Arc::new(next));
        Ok(AdaptOutcome {
            new_checkpoint: checkpoint.child(child_id, by_task.keys().copied()),
            rollouts_consumed: rollouts.len() as u64,
            student_tokens: rollouts
                .iter()
                .map(|r| u64::from(r.record.token_count))
                .sum(),
        })
    }
}
