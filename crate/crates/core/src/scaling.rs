//! Best-of-N scaling curves and the quantities read off them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::is_fast1;
use crate::model::{SampleRecord, TaskId};

pub const DEFAULT_K_GRID: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const DEFAULT_BOOTSTRAP_RESAMPLES: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error("no samples")]
    Empty,
    #[error("parameter out of range: {0}")]
    OutOfRange(String),
    #[error("task {task_id} seed {seed} has {have} samples, K={need} requested")]
    InsufficientSamples {
        task_id: TaskId,
        seed: u64,
        have: u32,
        need: u32,
    },
    #[error("K grid must be non-empty and strictly increasing")]
    BadGrid,
}

/// Fraction of samples that are correct and faster than the reference.
pub fn fast1_rate(samples: &[SampleRecord]) -> Result<f64, ScalingError> {
    if samples.is_empty() {
        return Err(ScalingError::Empty);
    }
    Ok(samples.iter().filter(|s| is_fast1(&s.outcome)).count() as f64 / samples.len() as f64)
}

/// Probability that at least one of `k` draws without replacement from `n`
/// samples, `c` of them fast, is fast: `1 - C(n-c, k) / C(n, k)`.
pub fn success_at_k(n: u32, c: u32, k: u32) -> Result<f64, ScalingError> {
    if c > n || k == 0 || k > n {
        return Err(ScalingError::OutOfRange(format!("n={n}, c={c}, k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (0..k)
        .map(|i| f64::from(n - c - i) / f64::from(n - i))
        .product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Range for fewer than three seeds, bootstrap otherwise.
    Auto,
    /// `[min, max]` of the per-seed means.
    Range,
    /// Percentile bootstrap over seeds.
    Bootstrap,
}

impl CiMethod {
    pub fn name(self) -> &'static str {
        match self {
            CiMethod::Auto => "auto",
            CiMethod::Range => "range",
            CiMethod::Bootstrap => "bootstrap",
        }
    }

    fn resolve(self, seeds: usize) -> CiMethod {
        match self {
            CiMethod::Auto if seeds >= 3 => CiMethod::Bootstrap,
            CiMethod::Auto => CiMethod::Range,
            m => m,
        }
    }
}

impl std::str::FromStr for CiMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(CiMethod::Auto),
            "range" => Ok(CiMethod::Range),
            "bootstrap" => Ok(CiMethod::Bootstrap),
            other => Err(format!(
                "unknown CI method '{other}' (auto, range, bootstrap)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "K")]
    pub k: u32,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub points: Vec<CurvePoint>,
    /// The method actually used (never `Auto`).
    pub ci_method: CiMethod,
    pub seeds: usize,
    pub tasks: usize,
}

/// Fast count of one `(task, seed)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub task_id: TaskId,
    pub seed: u64,
    pub n: u32,
    pub c: u32,
}

pub fn cell_counts(groups: &BTreeMap<(TaskId, u64), Vec<SampleRecord>>) -> Vec<CellCount> {
    groups
        .iter()
        .map(|(&(task_id, seed), v)| CellCount {
            task_id,
            seed,
            n: v.len() as u32,
            c: v.iter().filter(|s| is_fast1(&s.outcome)).count() as u32,
        })
        .collect()
}

pub fn build_curve(
    groups: &BTreeMap<(TaskId, u64), Vec<SampleRecord>>,
    ks: &[u32],
    ci: CiMethod,
    bootstrap_seed: u64,
) -> Result<ScalingCurve, ScalingError> {
    build_curve_from_counts(&cell_counts(groups), ks, ci, bootstrap_seed)
}

/// Per K: mean over tasks of `success_at_k`, then mean and spread over seeds.
pub fn build_curve_from_counts(
    cells: &[CellCount],
    ks: &[u32],
    ci: CiMethod,
    bootstrap_seed: u64,
) -> Result<ScalingCurve, ScalingError> {
    if cells.is_empty() {
        return Err(ScalingError::Empty);
    }
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(ScalingError::BadGrid);
    }
    let kmax = *ks.last().expect("non-empty");
    let mut by_seed: BTreeMap<u64, Vec<&CellCount>> = BTreeMap::new();
    for cell in cells {
        if cell.n < kmax {
            return Err(ScalingError::InsufficientSamples {
                task_id: cell.task_id,
                seed: cell.seed,
                have: cell.n,
                need: kmax,
            });
        }
        by_seed.entry(cell.seed).or_default().push(cell);
    }
    let tasks = cells
        .iter()
        .map(|c| c.task_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let method = ci.resolve(by_seed.len());
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut seed_means = Vec::with_capacity(by_seed.len());
        for cells in by_seed.values() {
            let mut total = 0.0;
            for cell in cells {
                total += success_at_k(cell.n, cell.c, k)?;
            }
            seed_means.push(total / cells.len() as f64);
        }
        let (mean, std) = mean_pop_std(&seed_means);
        let (ci_low, ci_high) = match method {
            CiMethod::Bootstrap => bootstrap_ci(
                &seed_means,
                DEFAULT_BOOTSTRAP_RESAMPLES,
                bootstrap_seed ^ u64::from(k),
            ),
            _ => seed_means
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
                    (lo.min(m), hi.max(m))
                }),
        };
        points.push(CurvePoint {
            k,
            mean,
            std,
            ci_low,
            ci_high,
        });
    }
    Ok(ScalingCurve {
        points,
        ci_method: method,
        seeds: by_seed.len(),
        tasks,
    })
}

fn mean_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// 2.5/97.5 percentiles of the resampled mean.
fn bootstrap_ci(xs: &[f64], resamples: u32, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = xs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    (at(0.025), at(0.975))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "K")]
pub enum EquivalentK {
    Exact(f64),
    BelowK1,
    AboveKmax,
}

/// Inverts the curve by piecewise-linear interpolation in `(log2 K, mean)`.
pub fn equivalent_k(curve: &ScalingCurve, target: f64) -> EquivalentK {
    let pts = &curve.points;
    let Some(first) = pts.first() else {
        return EquivalentK::BelowK1;
    };
    if target < first.mean {
        return EquivalentK::BelowK1;
    }
    if let Some(p) = pts.iter().find(|p| p.mean == target) {
        return EquivalentK::Exact(f64::from(p.k));
    }
    for w in pts.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.mean < target && target < b.mean {
            let (la, lb) = (f64::from(a.k).log2(), f64::from(b.k).log2());
            let t = (target - a.mean) / (b.mean - a.mean);
            return EquivalentK::Exact((la + t * (lb - la)).exp2());
        }
    }
    EquivalentK::AboveKmax
}

/// Smallest K whose gain to the next grid point is below `epsilon`; the last
/// K when every step still gains.
pub fn saturation_k(curve: &ScalingCurve, epsilon: f64) -> Option<u32> {
    let pts = &curve.points;
    pts.windows(2)
        .find(|w| w[1].mean - w[0].mean < epsilon)
        .map(|w| w[0].k)
        .or_else(|| pts.last().map(|p| p.k))
}
