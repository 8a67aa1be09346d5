//! Post-hoc selection over one task's sample set.
//!
//! Every strategy looks only at correct samples. Log-probability ties go to
//! the lowest `sample_index`, and inputs are sorted by index first, so the
//! order samples arrive in never matters.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::GatewayError;
use crate::evaluator::{is_fast1, EvalRequest, Evaluator};
use crate::hash::mix;
use crate::model::{SampleRecord, SelectionStrategy, TaskId};

/// Logprob standard deviation above which a task counts as high-variance.
pub const DEFAULT_REGIME_THRESHOLD: f64 = 1.0;
pub const DEFAULT_REGIME_MIN_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SelectionError {
    #[error("no samples to select from")]
    Empty,
    #[error("samples span several tasks ({0} and {1})")]
    MixedTasks(TaskId, TaskId),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("re-timing evaluation failed: {0}")]
    Evaluator(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy: SelectionStrategy,
    /// Absent when the task had no correct sample.
    pub chosen: Option<SampleRecord>,
    pub extra_evals_used: u32,
    pub fast1: bool,
    pub speedup: f64,
}

impl SelectionResult {
    fn none(strategy: SelectionStrategy) -> Self {
        Self {
            strategy,
            chosen: None,
            extra_evals_used: 0,
            fast1: false,
            speedup: 0.0,
        }
    }

    fn of(strategy: SelectionStrategy, chosen: SampleRecord, extra_evals_used: u32) -> Self {
        Self {
            strategy,
            fast1: is_fast1(&chosen.outcome),
            speedup: chosen.outcome.speedup,
            chosen: Some(chosen),
            extra_evals_used,
        }
    }

    pub fn chosen_index(&self) -> Option<u32> {
        self.chosen.as_ref().map(|c| c.sample_index)
    }
}

fn by_logprob(a: &&SampleRecord, b: &&SampleRecord) -> Ordering {
    a.total_logprob
        .total_cmp(&b.total_logprob)
        .then(a.sample_index.cmp(&b.sample_index))
}

fn sorted_correct(samples: &[SampleRecord]) -> Result<Vec<&SampleRecord>, SelectionError> {
    let first = samples.first().ok_or(SelectionError::Empty)?;
    if let Some(other) = samples.iter().find(|s| s.task_id != first.task_id) {
        return Err(SelectionError::MixedTasks(first.task_id, other.task_id));
    }
    let mut correct: Vec<&SampleRecord> = samples.iter().filter(|s| s.outcome.correct).collect();
    correct.sort_by_key(|s| (s.sample_index, s.seed));
    Ok(correct)
}

/// Applies `strategy` to one task's samples.
///
/// `evaluator` switches top-3 into re-timing mode; otherwise top-3 reuses the
/// recorded speedups. Either way it books one extra timing evaluation per
/// candidate.
pub fn select(
    strategy: SelectionStrategy,
    samples: &[SampleRecord],
    rng_seed: u64,
    evaluator: Option<&dyn Evaluator>,
) -> Result<SelectionResult, SelectionError> {
    let correct = sorted_correct(samples)?;
    if correct.is_empty() {
        return Ok(SelectionResult::none(strategy));
    }
    let pick = |s: &SampleRecord| SelectionResult::of(strategy, s.clone(), 0);
    let result = match strategy {
        SelectionStrategy::OracleBestCorrect => {
            // max_by keeps the last maximum, so scan in reverse index order.
            let best = correct
                .iter()
                .rev()
                .max_by(|a, b| a.outcome.speedup.total_cmp(&b.outcome.speedup))
                .expect("non-empty");
            pick(best)
        }
        SelectionStrategy::RandomCorrect => {
            let task = correct[0].task_id;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[rng_seed, u64::from(task)]));
            pick(correct[rng.random_range(0..correct.len())])
        }
        SelectionStrategy::ConfidenceGuided => {
            let best = correct
                .iter()
                .min_by(|a, b| {
                    b.total_logprob
                        .total_cmp(&a.total_logprob)
                        .then(a.sample_index.cmp(&b.sample_index))
                })
                .expect("non-empty");
            pick(best)
        }
        SelectionStrategy::SurprisalGuided => pick(
            correct
                .iter()
                .min_by(|a, b| by_logprob(a, b))
                .expect("non-empty"),
        ),
        SelectionStrategy::SurprisalGuidedTop3 => {
            let mut ranked = correct.clone();
            ranked.sort_by(by_logprob);
            ranked.truncate(3);
            let used = ranked.len() as u32;
            let mut candidates: Vec<SampleRecord> = Vec::with_capacity(ranked.len());
            for s in ranked {
                let mut c = s.clone();
                if let Some(ev) = evaluator {
                    let request = EvalRequest {
                        task_id: c.task_id,
                        code: &c.code,
                        trials: ev.profile().trials_default.max(1),
                    };
                    c.outcome = ev.evaluate(&request)?;
                }
                candidates.push(c);
            }
            // Fastest correct candidate; earlier (more surprising) wins ties.
            let best = candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.outcome.correct)
                .max_by(|(i, a), (j, b)| {
                    a.outcome
                        .speedup
                        .total_cmp(&b.outcome.speedup)
                        .then(j.cmp(i))
                })
                .map(|(i, _)| i);
            match best {
                Some(i) => SelectionResult::of(strategy, candidates.swap_remove(i), used),
                None => SelectionResult {
                    extra_evals_used: used,
                    ..SelectionResult::none(strategy)
                },
            }
        }
    };
    Ok(result)
}

/// Probability that a uniformly random correct pick is fast (0 with no
/// correct samples).
pub fn expected_random_fast1(samples: &[SampleRecord]) -> f64 {
    let correct: Vec<&SampleRecord> = samples.iter().filter(|s| s.outcome.correct).collect();
    if correct.is_empty() {
        return 0.0;
    }
    correct.iter().filter(|s| is_fast1(&s.outcome)).count() as f64 / correct.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    HighVariance,
    LowVariance,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::HighVariance => "high_variance",
            Regime::LowVariance => "low_variance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabel {
    pub task_id: TaskId,
    pub logprob_std: f64,
    pub label: Regime,
}

/// Population standard deviation of `total_logprob` against `threshold`.
pub fn detect_regime(
    samples: &[SampleRecord],
    threshold: f64,
    min_samples: usize,
) -> Result<RegimeLabel, SelectionError> {
    if samples.len() < min_samples.max(1) {
        return Err(SelectionError::TooFew {
            needed: min_samples.max(1),
            got: samples.len(),
        });
    }
    let first = samples[0].task_id;
    if let Some(other) = samples.iter().find(|s| s.task_id != first) {
        return Err(SelectionError::MixedTasks(first, other.task_id));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.total_logprob).sum::<f64>() / n;
    let var = samples
        .iter()
        .map(|s| (s.total_logprob - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    Ok(RegimeLabel {
        task_id: first,
        logprob_std: std,
        label: if std > threshold {
            Regime::HighVariance
        } else {
            Regime::LowVariance
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileBucket {
    /// 1 = highest surprisal.
    pub quartile: u8,
    pub count: usize,
    pub logprob_min: f64,
    pub logprob_max: f64,
    pub fast1_rate: f64,
    pub mean_speedup: f64,
    pub median_token_count: f64,
}

/// Pools correct samples across tasks, sorts by ascending log-probability and
/// cuts four near-equal buckets.
pub fn quartile_breakdown(samples: &[SampleRecord]) -> Result<[QuartileBucket; 4], SelectionError> {
    let mut correct: Vec<&SampleRecord> = samples.iter().filter(|s| s.outcome.correct).collect();
    if correct.len() < 4 {
        return Err(SelectionError::TooFew {
            needed: 4,
            got: correct.len(),
        });
    }
    correct.sort_by(|a, b| {
        a.total_logprob
            .total_cmp(&b.total_logprob)
            .then_with(|| a.key().cmp(&b.key()))
    });
    let n = correct.len();
    let mut start = 0;
    let buckets = std::array::from_fn(|q| {
        let size = n / 4 + usize::from(q < n % 4);
        let slice = &correct[start..start + size];
        start += size;
        let fast = slice.iter().filter(|s| is_fast1(&s.outcome)).count();
        let mut tokens: Vec<f64> = slice.iter().map(|s| f64::from(s.token_count)).collect();
        tokens.sort_by(f64::total_cmp);
        let median = if size % 2 == 1 {
            tokens[size / 2]
        } else {
            0.5 * (tokens[size / 2 - 1] + tokens[size / 2])
        };
        QuartileBucket {
            quartile: q as u8 + 1,
            count: size,
            logprob_min: slice[0].total_logprob,
            logprob_max: slice[size - 1].total_logprob,
            fast1_rate: fast as f64 / size as f64,
            mean_speedup: slice.iter().map(|s| s.outcome.speedup).sum::<f64>() / size as f64,
            median_token_count: median,
        }
    });
    Ok(buckets)
}

/// Aggregate of one strategy over many selection units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: SelectionStrategy,
    pub units: usize,
    pub fast1_count: usize,
    pub fast1_rate: f64,
    /// Mean chosen speedup; units without a correct sample count as 0.
    pub mean_speedup: f64,
    pub extra_evals: u64,
}

pub fn summarize(strategy: SelectionStrategy, results: &[&SelectionResult]) -> StrategySummary {
    let units = results.len();
    let fast1_count = results.iter().filter(|r| r.fast1).count();
    let denom = units.max(1) as f64;
    StrategySummary {
        strategy,
        units,
        fast1_count,
        fast1_rate: fast1_count as f64 / denom,
        mean_speedup: results.iter().map(|r| r.speedup).sum::<f64>() / denom,
        extra_evals: results.iter().map(|r| u64::from(r.extra_evals_used)).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Candidate, EvalOutcome};

    pub(crate) fn rec(index: u32, lp: f64, outcome: EvalOutcome) -> SampleRecord {
        Candidate {
            task_id: 4,
            seed: 42,
            sample_index: index,
            code: format!("k{index}"),
            token_count: 100 + index,
            total_logprob: lp,
        }
        .with_outcome(outcome)
    }

    fn ok(speedup: f64) -> EvalOutcome {
        EvalOutcome::correct(speedup, 1.0 / speedup, 5)
    }

    #[test]
    fn surprisal_and_confidence_pick_opposite_ends() {
        let s = vec![
            rec(0, -10.0, ok(5.0)),
            rec(1, -2.0, ok(1.1)),
            rec(2, -30.0, EvalOutcome::incorrect("x", 5)),
        ];
        let sur = select(SelectionStrategy::SurprisalGuided, &s, 0, None).unwrap();
        assert_eq!(sur.chosen_index(), Some(0));
        assert_eq!(sur.speedup, 5.0);
        let conf = select(SelectionStrategy::ConfidenceGuided, &s, 0, None).unwrap();
        assert_eq!(conf.chosen_index(), Some(1));
        assert_eq!(conf.speedup, 1.1);
    }

    #[test]
    fn singleton_is_picked_by_everyone() {
        let s = vec![
            rec(3, -4.0, ok(1.5)),
            rec(4, -1.0, EvalOutcome::compile_failure("x", 5)),
        ];
        for st in SelectionStrategy::ALL {
            let r = select(st, &s, 9, None).unwrap();
            assert_eq!(r.chosen_index(), Some(3), "{st}");
        }
    }

    #[test]
    fn no_correct_sample() {
        let s = vec![rec(0, -4.0, EvalOutcome::incorrect("x", 5))];
        for st in SelectionStrategy::ALL {
            let r = select(st, &s, 1, None).unwrap();
            assert!(r.chosen.is_none() && !r.fast1 && r.extra_evals_used == 0);
        }
    }

    #[test]
    fn top3_books_extra_evals() {
        let s: Vec<_> = (0..6)
            .map(|i| rec(i, -(i as f64), ok(1.0 + f64::from(i))))
            .collect();
        let r = select(SelectionStrategy::SurprisalGuidedTop3, &s, 0, None).unwrap();
        assert_eq!(r.extra_evals_used, 3);
        // Lowest logprobs are indices 5, 4, 3; fastest is 5.
        assert_eq!(r.chosen_index(), Some(5));
        let two = &s[..2];
        assert_eq!(
            select(SelectionStrategy::SurprisalGuidedTop3, two, 0, None)
                .unwrap()
                .extra_evals_used,
            2
        );
    }

    #[test]
    fn logprob_ties_go_to_lowest_index() {
        let s = vec![
            rec(2, -5.0, ok(3.0)),
            rec(0, -5.0, ok(2.0)),
            rec(1, -5.0, ok(4.0)),
        ];
        let sur = select(SelectionStrategy::SurprisalGuided, &s, 0, None).unwrap();
        let conf = select(SelectionStrategy::ConfidenceGuided, &s, 0, None).unwrap();
        assert_eq!(sur.chosen_index(), Some(0));
        assert_eq!(conf.chosen_index(), Some(0));
    }

    #[test]
    fn mixed_tasks_rejected() {
        let mut s = vec![rec(0, -1.0, ok(2.0)), rec(1, -1.0, ok(2.0))];
        s[1].task_id = 5;
        assert_eq!(
            select(SelectionStrategy::OracleBestCorrect, &s, 0, None).unwrap_err(),
            SelectionError::MixedTasks(4, 5)
        );
    }

    #[test]
    fn regime_labels() {
        let high: Vec<_> = (0..8)
            .map(|i| rec(i, if i % 2 == 0 { -10.0 } else { -13.0 }, ok(2.0)))
            .collect();
        let l = detect_regime(&high, 1.0, 8).unwrap();
        assert!((l.logprob_std - 1.5).abs() < 1e-12);
        assert_eq!(l.label, Regime::HighVariance);
        let low: Vec<_> = (0..8)
            .map(|i| rec(i, if i % 2 == 0 { -10.0 } else { -10.2 }, ok(2.0)))
            .collect();
        let l = detect_regime(&low, 1.0, 8).unwrap();
        assert!((l.logprob_std - 0.1).abs() < 1e-9);
        assert_eq!(l.label, Regime::LowVariance);
        assert!(matches!(
            detect_regime(&low[..3], 1.0, 8),
            Err(SelectionError::TooFew { .. })
        ));
    }

    #[test]
    fn quartiles_by_hand() {
        // Ascending logprob: indices 7..0; speedups chosen per pair.
        let speeds = [0.5, 2.0, 1.5, 3.0, 0.9, 1.1, 4.0, 6.0];
        let s: Vec<_> = (0..8)
            .map(|i| rec(i, -(8.0 - f64::from(i)), ok(speeds[i as usize])))
            .collect();
        let q = quartile_breakdown(&s).unwrap();
        assert!(q.iter().all(|b| b.count == 2));
        assert_eq!(q[0].logprob_min, -8.0);
        assert_eq!(q[0].fast1_rate, 0.5);
        assert!((q[0].mean_speedup - 1.25).abs() < 1e-12);
        assert_eq!(q[0].median_token_count, 100.5);
        assert_eq!(q[1].fast1_rate, 1.0);
        assert_eq!(q[2].fast1_rate, 0.5);
        assert!((q[3].mean_speedup - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quartile_sizes_differ_by_at_most_one() {
        let s: Vec<_> = (0..11).map(|i| rec(i, -f64::from(i), ok(2.0))).collect();
        let sizes: Vec<usize> = quartile_breakdown(&s)
            .unwrap()
            .iter()
            .map(|b| b.count)
            .collect();
        assert_eq!(sizes, vec![3, 3, 3, 2]);
    }

    #[test]
    fn identical_samples_give_identical_quartiles() {
        let s: Vec<_> = (0..8).map(|i| rec(i, -3.0, ok(1.5))).collect();
        let q = quartile_breakdown(&s).unwrap();
        assert!(q
            .iter()
            .all(|b| b.fast1_rate == 1.0 && b.mean_speedup == 1.5));
    }
}
