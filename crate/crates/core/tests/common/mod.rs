//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use testtime_core::adaptation::{step_seed, Backends, LoopConfig, UpdateRule};
use testtime_core::evaluator::tag::{ArchetypeClass, KernelTag};
use testtime_core::evaluator::SyntheticEvaluator;
use testtime_core::model::{
    BackendKind, Candidate, CheckpointRef, EvalOutcome, SampleRecord, TaskId,
};
use testtime_core::policy::{PolicyGateway, ReplayPolicy};

pub const SUBSET1: [TaskId; 5] = [4, 5, 12, 14, 15];
pub const SUBSET2: [TaskId; 5] = [18, 28, 29, 30, 32];

/// fast_1 counts out of 64 per seed, tasks in `SUBSET1` order.
pub const SCALING_COUNTS: [(u64, [u32; 5]); 2] =
    [(42, [22, 23, 38, 15, 62]), (43, [29, 64, 25, 26, 37])];

/// Batch adaptation fast_1 counts out of 32 per step, tasks in `SUBSET1` order.
pub const TRAJECTORY_COUNTS: [[u32; 5]; 6] = [
    [3, 1, 32, 12, 12],
    [9, 5, 32, 7, 11],
    [15, 2, 32, 6, 13],
    [8, 1, 32, 7, 10],
    [7, 1, 32, 5, 13],
    [8, 3, 32, 13, 10],
];

pub fn record(
    task_id: TaskId,
    seed: u64,
    sample_index: u32,
    logprob: f64,
    outcome: EvalOutcome,
) -> SampleRecord {
    Candidate {
        task_id,
        seed,
        sample_index,
        code: format!("kernel t{task_id} s{seed} #{sample_index}"),
        token_count: 900 + sample_index,
        total_logprob: logprob,
    }
    .with_outcome(outcome)
}

pub fn correct(speedup: f64) -> EvalOutcome {
    EvalOutcome::correct(speedup, 1.0 / speedup, 5)
}

pub fn wrong() -> EvalOutcome {
    EvalOutcome::incorrect("mismatch", 5)
}

/// `k` records per unit with exactly `fast` of them fast_1.
pub fn count_records(task_id: TaskId, seed: u64, k: u32, fast: u32) -> Vec<SampleRecord> {
    (0..k)
        .map(|i| {
            let outcome = if i < fast { correct(1.5) } else { wrong() };
            record(task_id, seed, i, -100.0 - f64::from(i), outcome)
        })
        .collect()
}

pub fn scaling_records() -> Vec<SampleRecord> {
    SCALING_COUNTS
        .iter()
        .flat_map(|&(seed, counts)| {
            SUBSET1
                .iter()
                .zip(counts)
                .flat_map(move |(&t, c)| count_records(t, seed, 64, c))
        })
        .collect()
}

/// Designed outcome of one `(task, seed)` selection unit.
#[derive(Debug, Clone, Copy)]
pub struct Unit {
    pub task_id: TaskId,
    pub seed: u64,
    /// Correct samples out of 64.
    pub correct: u32,
    /// fast_1 samples out of 64.
    pub fast: u32,
    /// Speedup of the highest-surprisal correct sample.
    pub surprisal: f64,
    /// Best of the three highest-surprisal correct samples.
    pub top3: f64,
    pub oracle: f64,
    /// Speedup of the lowest-surprisal correct sample.
    pub confidence: f64,
}

#[allow(clippy::too_many_arguments)]
const fn unit(
    task_id: TaskId,
    seed: u64,
    correct: u32,
    fast: u32,
    s: f64,
    t: f64,
    o: f64,
    c: f64,
) -> Unit {
    Unit {
        task_id,
        seed,
        correct,
        fast,
        surprisal: s,
        top3: t,
        oracle: o,
        confidence: c,
    }
}

/// Ten units whose fast counts equal `SCALING_COUNTS`. Surprisal succeeds
/// on 8, confidence on 5 (a subset), top-3 and oracle on all 10.
pub const SELECTION_UNITS: [Unit; 10] = [
    unit(4, 42, 34, 22, 100.0, 250.0, 350.0, 0.8),
    unit(5, 42, 63, 23, 0.9, 20.0, 120.0, 0.95),
    unit(12, 42, 64, 38, 1.5, 150.0, 250.0, 1.6),
    unit(14, 42, 58, 15, 80.0, 200.0, 279.0, 0.9),
    unit(15, 42, 62, 62, 60.0, 200.0, 300.0, 50.0),
    unit(4, 43, 49, 29, 2.0, 100.0, 200.0, 2.2),
    unit(5, 43, 64, 64, 50.0, 150.0, 250.0, 40.0),
    unit(12, 43, 63, 25, 86.8, 195.0, 195.0, 0.7),
    unit(14, 43, 64, 26, 0.8, 25.0, 125.0, 0.85),
    unit(15, 43, 56, 37, 30.0, 100.0, 200.0, 18.0),
];

/// 64 records for one unit. Correct samples are laid out by ascending
/// logprob as: surprisal pick, top-3 winner, a filler, the oracle pick, more
/// fillers, and the confidence pick last.
pub fn unit_records(u: &Unit) -> Vec<SampleRecord> {
    let mut speeds = vec![u.surprisal, u.top3];
    let mut designated = vec![u.surprisal, u.top3, u.confidence];
    if u.oracle > u.top3 {
        designated.push(u.oracle);
    }
    let fast_designated = designated.iter().filter(|&&s| s > 1.0).count() as u32;
    let slow_designated = designated.len() as u32 - fast_designated;
    let mut fast_fill = u.fast - fast_designated;
    let mut slow_fill = u.correct - u.fast - slow_designated;
    let mut fillers = Vec::new();
    let mut i = 0;
    while fast_fill + slow_fill > 0 {
        if fast_fill > 0 && (slow_fill == 0 || i % 2 == 0) {
            fillers.push(1.2 + 0.01 * f64::from(i));
            fast_fill -= 1;
        } else {
            fillers.push(0.5 + 0.005 * f64::from(i));
            slow_fill -= 1;
        }
        i += 1;
    }
    let mut rest = fillers.into_iter();
    if let Some(f) = rest.next() {
        speeds.push(f);
    }
    if u.oracle > u.top3 {
        speeds.push(u.oracle);
    }
    speeds.extend(rest);
    speeds.push(u.confidence);
    assert_eq!(speeds.len() as u32, u.correct);

    let mut out = Vec::with_capacity(64);
    let mut slot = 0u32;
    let mut next_index = || {
        let idx = (slot * 37 + u.task_id) % 64;
        slot += 1;
        idx
    };
    for (rank, s) in speeds.iter().enumerate() {
        out.push(record(
            u.task_id,
            u.seed,
            next_index(),
            -300.0 + 4.0 * rank as f64,
            correct(*s),
        ));
    }
    for j in 0..(64 - u.correct) {
        out.push(record(
            u.task_id,
            u.seed,
            next_index(),
            -320.0 + 3.7 * f64::from(j),
            wrong(),
        ));
    }
    out.sort_by_key(|r| r.sample_index);
    out
}

pub fn selection_records() -> Vec<SampleRecord> {
    SELECTION_UNITS.iter().flat_map(unit_records).collect()
}

/// Synthetic-evaluator source that always evaluates as fast_1.
pub fn fast_code(nonce: u64) -> String {
    tagged(1.0, nonce)
}

/// Synthetic-evaluator source that always evaluates as incorrect.
pub fn wrong_code(nonce: u64) -> String {
    tagged(0.0, nonce)
}

fn tagged(correct_rate: f64, nonce: u64) -> String {
    let tag = KernelTag {
        arch: 0,
        class: ArchetypeClass::NaiveMode,
        compile_rate: 1.0,
        correct_rate,
        speedup_median: 2.0,
        speedup_dispersion: 0.0,
        link: 0.0,
        z: 0.0,
        nonce,
    };
    format!("{tag}\n__global__ void k() {{}}\n")
}

pub fn scripted_batch(task_id: TaskId, seed: u64, k: u32, fast: u32) -> Vec<Candidate> {
    (0..k)
        .map(|i| Candidate {
            task_id,
            seed,
            sample_index: i,
            code: if i < fast {
                fast_code(seed ^ u64::from(i) << 8 ^ u64::from(task_id))
            } else {
                wrong_code(seed ^ u64::from(i) << 8 ^ u64::from(task_id))
            },
            token_count: 1000,
            total_logprob: -50.0 - f64::from(i),
        })
        .collect()
}

/// Replay backends whose adaptation loop reproduces `counts` step by step.
pub fn scripted_trajectory(
    counts: &[[u32; 5]],
    k: u32,
    seed: u64,
) -> (Backends, LoopConfig, CheckpointRef) {
    let ids: Vec<String> = (0..counts.len()).map(|s| format!("theta{s}")).collect();
    let mut policy = ReplayPolicy::new().with_root(&ids[0]);
    for (s, row) in counts.iter().enumerate() {
        // Step 0 samples theta0; step s >= 1 samples theta(s-1).
        let ck = &ids[s.saturating_sub(1)];
        for (&task, &fast) in SUBSET1.iter().zip(row) {
            let sseed = step_seed(seed, s as u32);
            policy = policy.with_samples(ck, task, sseed, scripted_batch(task, sseed, k, fast));
        }
        if s + 1 < ids.len() {
            policy = policy.with_child(&ids[s], &ids[s + 1]);
        }
    }
    let backends = Backends {
        policy: PolicyGateway::new(Arc::new(policy)),
        evaluator: Arc::new(SyntheticEvaluator::with_tasks(&SUBSET1)),
    };
    let config = LoopConfig {
        tasks: SUBSET1.to_vec(),
        k,
        steps: counts.len() as u32 - 1,
        learning_rate: 1e-5,
        temperature: 0.25,
        max_tokens: 2048,
        seed,
        trials: 5,
        workers: Some(2),
        update: UpdateRule::Reward,
    };
    (
        backends,
        config,
        CheckpointRef::root(&ids[0], BackendKind::Synthetic),
    )
}

/// Twenty tasks: 9 with logprob std above 1.0, 7 below 0.15, 4 in between.
pub fn regime_records() -> Vec<SampleRecord> {
    let stds: Vec<f64> = (0..20)
        .map(|i| match i {
            0..=8 => 1.2 + 0.4 * f64::from(i),
            9..=15 => 0.02 + 0.015 * f64::from(i - 9),
            _ => 0.3 + 0.15 * f64::from(i - 16),
        })
        .collect();
    let mut out = Vec::new();
    for (t, sd) in stds.iter().enumerate() {
        for i in 0..16u32 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            out.push(record(
                100 + t as u32,
                42,
                i,
                -80.0 + sign * sd,
                correct(1.1),
            ));
        }
    }
    out
}

/// 1012 pooled correct samples whose logprob quartiles hold 120, 205, 183 and 111
/// fast_1 samples out of 253.
pub fn quartile_records() -> Vec<SampleRecord> {
    let fast = [120u32, 205, 183, 111];
    let mut out = Vec::new();
    let mut idx = 0u32;
    for (q, &f) in fast.iter().enumerate() {
        for j in 0..253u32 {
            let lp = -400.0 + 100.0 * q as f64 + 0.3 * f64::from(j);
            let speedup = if j < f { 1.4 } else { 0.7 };
            out.push(record(7, 42, idx, lp, correct(speedup)));
            idx += 1;
        }
    }
    out
}

/// Replay backends for transfer: `base` and an adapted child serve fixed
/// fast counts (out of 32 per task) on `eval_tasks`.
pub fn scripted_transfer(
    adapted_on: &[TaskId],
    eval_tasks: &[TaskId],
    base_fast: &[u32],
    adapted_fast: &[u32],
    seed: u64,
) -> (Backends, CheckpointRef, CheckpointRef) {
    let base = CheckpointRef::root("base", BackendKind::Synthetic);
    let adapted = base.child("base@adapted", adapted_on.iter().copied());
    let mut policy = ReplayPolicy::new().with_root("base");
    for (i, &task) in eval_tasks.iter().enumerate() {
        policy = policy
            .with_samples(
                "base",
                task,
                seed,
                scripted_batch(task, seed, 32, base_fast[i]),
            )
            .with_samples(
                "base@adapted",
                task,
                seed,
                scripted_batch(task, seed, 32, adapted_fast[i]),
            );
    }
    let mut all: Vec<TaskId> = adapted_on.to_vec();
    all.extend_from_slice(eval_tasks);
    let backends = Backends {
        policy: PolicyGateway::new(Arc::new(policy)),
        evaluator: Arc::new(SyntheticEvaluator::with_tasks(&all)),
    };
    (backends, base, adapted)
}

/// A permutation of `0..n` whose rank correlation with the identity is
/// `rho` to within `1e-5`.
pub fn permutation_with_rho(n: usize, rho: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    let nf = n as f64;
    let target = (1.0 - rho) * nf * (nf * nf - 1.0) / 6.0;
    let tol = 1e-5 * nf * (nf * nf - 1.0) / 6.0;
    let d2 = |v: usize, i: usize| (v as f64 - i as f64).powi(2);
    let mut sum: f64 = p.iter().enumerate().map(|(i, &v)| d2(v, i)).sum();
    while (sum - target).abs() > tol {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let delta = d2(p[j], i) + d2(p[i], j) - d2(p[i], i) - d2(p[j], j);
        if (sum + delta - target).abs() < (sum - target).abs() {
            p.swap(i, j);
            sum += delta;
        }
    }
    p
}

/// 550 correct samples: logprob vs speedup rank correlation -0.047, token
/// count vs speedup -0.039.
pub fn length_control_records() -> Vec<SampleRecord> {
    let lp = permutation_with_rho(550, -0.047, 5);
    let len = permutation_with_rho(550, -0.039, 6);
    (0..550)
        .map(|i| {
            let mut r = record(
                1 + (i % 11) as u32,
                42,
                i as u32,
                -200.0 + 0.25 * lp[i] as f64,
                correct(0.4 + 0.01 * i as f64),
            );
            r.token_count = 400 + len[i] as u32;
            r
        })
        .collect()
}
