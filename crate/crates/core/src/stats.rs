//! Rank correlations, effect sizes, exact small-sample tests and the
//! NLL-versus-speedup probe across checkpoints.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{GatewayError, StatsError};
use crate::model::{CheckpointRef, SampleRecord};
use crate::parallel::map_ordered;

/// Largest sample size that gets an exact permutation p-value.
pub const EXACT_SPEARMAN_MAX_N: usize = 10;
/// Largest count of non-zero differences with an exact Wilcoxon null.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PMethod {
    ExactPermutation,
    TApproximation,
    Exact,
    NormalApproximation,
}

impl PMethod {
    pub fn name(self) -> &'static str {
        match self {
            PMethod::ExactPermutation => "exact_permutation",
            PMethod::TApproximation => "t_approximation",
            PMethod::Exact => "exact",
            PMethod::NormalApproximation => "normal_approximation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_two_sided: f64,
    pub n: usize,
    pub method: PMethod,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn centered(xs: &[f64]) -> (Vec<f64>, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let ss = c.iter().map(|x| x * x).sum::<f64>();
    (c, ss)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let (cx, sx) = centered(x);
    let (cy, sy) = centered(y);
    if sx <= 0.0 || sy <= 0.0 {
        return Err(StatsError::ConstantInput);
    }
    let cov: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    Ok((cov / (sx * sy).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(x: &[f64], y: &[f64], needed: usize) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(StatsError::TooFew {
            needed,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite value".into()));
    }
    Ok(())
}

/// Two-sided p for a correlation `r` on `df` degrees of freedom.
fn t_p_value(r: f64, df: f64) -> f64 {
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Share of rank permutations at least as extreme as the observed one.
fn permutation_p(rx: &[f64], ry: &[f64]) -> f64 {
    let n = rx.len();
    let (cx, _) = centered(rx);
    let stat = |perm: &[f64]| cx.iter().zip(perm).map(|(a, b)| a * b).sum::<f64>();
    let observed = stat(ry).abs();
    let tol = 1e-9 * (1.0 + observed);
    let mut perm = ry.to_vec();
    let mut c = vec![0usize; n];
    let mut total = 1u64;
    let mut extreme = u64::from(stat(&perm).abs() >= observed - tol);
    // Heap's algorithm.
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += 1;
            if stat(&perm).abs() >= observed - tol {
                extreme += 1;
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Spearman rank correlation with a two-sided p-value.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    check_pair(x, y, 3)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry)?;
    let n = x.len();
    let (p, method) = if n <= EXACT_SPEARMAN_MAX_N {
        (permutation_p(&rx, &ry), PMethod::ExactPermutation)
    } else {
        (t_p_value(rho, (n - 2) as f64), PMethod::TApproximation)
    };
    Ok(Correlation {
        rho,
        p_two_sided: p,
        n,
        method,
    })
}

/// Rank correlation of `x` and `y` with `z` partialled out.
///
/// A constant control carries no information and leaves the plain rank
/// correlation unchanged.
pub fn partial_spearman(x: &[f64], y: &[f64], z: &[f64]) -> Result<Correlation, StatsError> {
    check_pair(x, y, 4)?;
    check_pair(x, z, 4)?;
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rz = average_ranks(z);
    let rxy = pearson(&rx, &ry)?;
    let (rxz, ryz) = match (pearson(&rx, &rz), pearson(&ry, &rz)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(StatsError::ConstantInput), Err(StatsError::ConstantInput)) => (0.0, 0.0),
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    let denom = ((1.0 - rxz * rxz) * (1.0 - ryz * ryz)).sqrt();
    if denom <= 1e-12 {
        return Err(StatsError::DegenerateControl);
    }
    let rho = ((rxy - rxz * ryz) / denom).clamp(-1.0, 1.0);
    let n = x.len();
    Ok(Correlation {
        rho,
        p_two_sided: t_p_value(rho, (n - 3) as f64),
        n,
        method: PMethod::TApproximation,
    })
}

/// Effect size between two proportions: `2 asin(sqrt p1) - 2 asin(sqrt p2)`.
pub fn cohens_h(p1: f64, p2: f64) -> f64 {
    let phi = |p: f64| 2.0 * p.clamp(0.0, 1.0).sqrt().asin();
    phi(p1) - phi(p2)
}

/// One-sided `P(X >= wins)` for `X ~ Binomial(discordant, 1/2)`.
pub fn exact_sign_test(wins: u32, discordant: u32) -> Result<f64, StatsError> {
    if wins > discordant {
        return Err(StatsError::InvalidInput(format!(
            "wins {wins} > discordant {discordant}"
        )));
    }
    let n = discordant;
    let mut pmf = 0.5f64.powi(n as i32);
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= wins {
            tail += pmf;
        }
        pmf *= f64::from(n - i) / f64::from(i + 1);
    }
    Ok(tail.min(1.0))
}

/// Paired outcomes of two methods on shared units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub pairs: Vec<(String, f64, f64)>,
    pub wins_a: u32,
    pub discordant: u32,
}

impl PairedComparison {
    pub fn new(pairs: Vec<(String, f64, f64)>) -> Self {
        let discordant = pairs.iter().filter(|(_, a, b)| a != b).count() as u32;
        let wins_a = pairs.iter().filter(|(_, a, b)| a > b).count() as u32;
        Self {
            pairs,
            wins_a,
            discordant,
        }
    }

    pub fn sign_test(&self) -> f64 {
        exact_sign_test(self.wins_a, self.discordant).expect("wins never exceed discordant")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    LogRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Non-zero differences used.
    pub n: usize,
    /// One-sided, alternative `a > b`.
    pub p_greater: f64,
    /// One-sided, alternative `a < b`.
    pub p_less: f64,
    pub p_two_sided: f64,
    pub method: PMethod,
}

/// Wilcoxon signed-rank test on `a - b` (or `ln(a / b)`).
///
/// Zero differences are dropped and tied magnitudes share average ranks.
pub fn wilcoxon_signed_rank(
    pairs: &[(f64, f64)],
    transform: Transform,
) -> Result<WilcoxonResult, StatsError> {
    let mut diffs = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let d = match transform {
            Transform::Identity => a - b,
            Transform::LogRatio => {
                if !(a > 0.0 && b > 0.0) {
                    return Err(StatsError::InvalidInput(format!(
                        "log ratio needs positive values, got ({a}, {b})"
                    )));
                }
                (a / b).ln()
            }
        };
        if !d.is_finite() {
            return Err(StatsError::InvalidInput("non-finite difference".into()));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    let n = diffs.len();
    if n < 5 {
        return Err(StatsError::TooFew { needed: 5, got: n });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_greater, p_less, method) = if n <= EXACT_WILCOXON_MAX_N {
        let (g, l) = exact_wilcoxon_tails(&ranks, w_plus);
        (g, l, PMethod::Exact)
    } else {
        let mean = total / 2.0;
        let ties: f64 = tie_groups(&ranks).iter().map(|&t| t * t * t - t).sum();
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - ties / 48.0;
        let sd = var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let g = 1.0 - normal.cdf((w_plus - mean - 0.5) / sd);
        let l = normal.cdf((w_plus - mean + 0.5) / sd);
        (g, l, PMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_greater: p_greater.min(1.0),
        p_less: p_less.min(1.0),
        p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
        method,
    })
}

fn tie_groups(ranks: &[f64]) -> Vec<f64> {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push((j - i) as f64);
        }
        i = j;
    }
    out
}

/// `(P(W+ >= w), P(W+ <= w))` under the exact sign-flip null. Average ranks
/// are halves at worst, so the null is counted over doubled integer ranks.
fn exact_wilcoxon_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let total = 2f64.powi(ranks.len() as i32);
    let w = (2.0 * w_plus).round() as usize;
    let ge: f64 = counts[w..].iter().sum();
    let le: f64 = counts[..=w].iter().sum();
    (ge / total, le / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStep {
    pub step: u32,
    pub checkpoint_id: String,
    pub rho_all: f64,
    pub p_all: f64,
    /// Over the `tail_fraction` of samples with the highest NLL.
    pub rho_tail: f64,
    pub p_tail: f64,
    pub n_tail: usize,
    pub mean_nll: f64,
    /// Alternative tail: the `tail_fraction` of samples with the lowest
    /// speedup. `None` when that slice has constant speedup or NLL.
    pub rho_low_speedup: Option<f64>,
    pub p_low_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub tail_fraction: f64,
    pub n_samples: usize,
    pub per_step: Vec<ProbeStep>,
    /// `nll[c][i]`: sample `i` under checkpoint `c`.
    pub nll: Vec<Vec<f64>>,
}

fn tail_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

fn correlation_or_nan(x: &[f64], y: &[f64]) -> (f64, f64) {
    match spearman(x, y) {
        Ok(c) => (c.rho, c.p_two_sided),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

/// Scores one fixed sample set under every checkpoint and tracks the rank
/// correlation between NLL and speedup.
pub fn anticalibration_probe<F>(
    samples: &[SampleRecord],
    checkpoints: &[CheckpointRef],
    score_nll: F,
    tail_fraction: f64,
    workers: Option<usize>,
) -> Result<ProbeResult, StatsError>
where
    F: Fn(&CheckpointRef, &SampleRecord) -> Result<f64, GatewayError> + Sync + Send,
{
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(StatsError::InvalidInput(format!(
            "tail_fraction {tail_fraction} outside (0, 1]"
        )));
    }
    if samples.len() < 3 {
        return Err(StatsError::TooFew {
            needed: 3,
            got: samples.len(),
        });
    }
    if checkpoints.windows(2).any(|w| w[0].step() >= w[1].step()) {
        return Err(StatsError::InvalidInput(
            "checkpoints must have ascending steps".into(),
        ));
    }
    let cells: Vec<(usize, usize)> = (0..checkpoints.len())
        .flat_map(|c| (0..samples.len()).map(move |i| (c, i)))
        .collect();
    let scored = map_ordered(&cells, workers, |&(c, i)| {
        score_nll(&checkpoints[c], &samples[i])
    });
    let mut nll = vec![Vec::with_capacity(samples.len()); checkpoints.len()];
    for ((c, _), v) in cells.iter().zip(scored) {
        nll[*c].push(v?);
    }

    let speed: Vec<f64> = samples.iter().map(|s| s.outcome.speedup).collect();
    let k = tail_count(samples.len(), tail_fraction);
    let mut by_speed: Vec<usize> = (0..samples.len()).collect();
    by_speed.sort_by(|&a, &b| {
        speed[a]
            .total_cmp(&speed[b])
            .then(samples[a].key().cmp(&samples[b].key()))
    });
    let low_speed = &by_speed[..k];

    let mut per_step = Vec::with_capacity(checkpoints.len());
    for (ck, row) in checkpoints.iter().zip(&nll) {
        let all = spearman(row, &speed)?;
        let mut by_nll: Vec<usize> = (0..samples.len()).collect();
        by_nll.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then(samples[a].key().cmp(&samples[b].key()))
        });
        let tail = &by_nll[..k];
        let (rho_tail, p_tail) = correlation_or_nan(
            &tail.iter().map(|&i| row[i]).collect::<Vec<_>>(),
            &tail.iter().map(|&i| speed[i]).collect::<Vec<_>>(),
        );
        let low = spearman(
            &low_speed.iter().map(|&i| row[i]).collect::<Vec<_>>(),
            &low_speed.iter().map(|&i| speed[i]).collect::<Vec<_>>(),
        )
        .ok();
        per_step.push(ProbeStep {
            step: ck.step(),
            checkpoint_id: ck.id.clone(),
            rho_all: all.rho,
            p_all: all.p_two_sided,
            rho_tail,
            p_tail,
            n_tail: k,
            mean_nll: row.iter().sum::<f64>() / row.len() as f64,
            rho_low_speedup: low.map(|c| c.rho),
            p_low_speedup: low.map(|c| c.p_two_sided),
        });
    }
    Ok(ProbeResult {
        tail_fraction,
        n_samples: samples.len(),
        per_step,
        nll,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthControl {
    pub n: usize,
    pub logprob_speedup: Correlation,
    /// `None` when the length control is degenerate.
    pub logprob_speedup_given_length: Option<Correlation>,
    /// `None` when lengths or speedups are constant.
    pub length_speedup: Option<Correlation>,
}

/// The three length-control correlations over correct samples.
pub fn length_control_report(samples: &[SampleRecord]) -> Result<LengthControl, StatsError> {
    let correct: Vec<&SampleRecord> = samples.iter().filter(|s| s.outcome.correct).collect();
    if correct.len() < 4 {
        return Err(StatsError::TooFew {
            needed: 4,
            got: correct.len(),
        });
    }
    let lp: Vec<f64> = correct.iter().map(|s| s.total_logprob).collect();
    let sp: Vec<f64> = correct.iter().map(|s| s.outcome.speedup).collect();
    let len: Vec<f64> = correct.iter().map(|s| f64::from(s.token_count)).collect();
    let logprob_speedup = spearman(&lp, &sp)?;
    let partial = match partial_spearman(&lp, &sp, &len) {
        Ok(c) => Some(c),
        Err(StatsError::DegenerateControl) => None,
        Err(e) => return Err(e),
    };
    let length_speedup = match spearman(&len, &sp) {
        Ok(c) => Some(c),
        Err(StatsError::ConstantInput) => None,
        Err(e) => return Err(e),
    };
    Ok(LengthControl {
        n: correct.len(),
        logprob_speedup,
        logprob_speedup_given_length: partial,
        length_speedup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_wilcoxon(diffs: &[f64]) -> (f64, f64) {
        let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let obs: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| r)
            .sum();
        let n = diffs.len();
        let (mut ge, mut le) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let w: f64 = (0..n)
                .filter(|i| mask >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            ge += u64::from(w >= obs - 1e-9);
            le += u64::from(w <= obs + 1e-9);
        }
        let t = f64::from(1u32 << n);
        (ge as f64 / t, le as f64 / t)
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 20.0, 5.0]),
            vec![2.0, 3.5, 3.5, 1.0]
        );
    }

    #[test]
    fn spearman_extremes() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let up: Vec<f64> = x.iter().map(|v| v * v).collect();
        let down: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &up).unwrap().rho, 1.0);
        assert_eq!(spearman(&x, &down).unwrap().rho, -1.0);
        assert_eq!(spearman(&x, &up).unwrap().p_two_sided, 0.0);
        assert_eq!(
            spearman(&x, &[1.0; 12]).unwrap_err(),
            StatsError::ConstantInput
        );
        assert_eq!(
            spearman(&x[..3], &x[..4]).unwrap_err(),
            StatsError::LengthMismatch(3, 4)
        );
    }

    #[test]
    fn small_n_uses_exact_permutation() {
        // n = 4, perfect order: 2 of 24 permutations are as extreme.
        let c = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(c.method, PMethod::ExactPermutation);
        assert!((c.p_two_sided - 2.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn t_approximation_reference_value() {
        // Reference: rho = 0.745454..., p = 0.0084547 (scipy.stats.spearmanr).
        let x: Vec<f64> = (1..=11).map(f64::from).collect();
        let y = [2.0, 1.0, 4.0, 3.0, 7.0, 11.0, 5.0, 9.0, 6.0, 10.0, 8.0];
        let c = spearman(&x, &y).unwrap();
        assert_eq!(c.method, PMethod::TApproximation);
        let r = pearson(&average_ranks(&x), &average_ranks(&y)).unwrap();
        assert!((c.rho - r).abs() < 1e-15);
        let t = r * (9.0 / (1.0 - r * r)).sqrt();
        let p = 2.0 * (1.0 - StudentsT::new(0.0, 1.0, 9.0).unwrap().cdf(t));
        assert!((c.p_two_sided - p).abs() < 1e-12);
        assert!((c.rho - 0.745_454_545_454_545_6).abs() < 1e-12);
        assert!((c.p_two_sided - 0.008_454_728_885_061_56).abs() < 1e-9);
    }

    #[test]
    fn partial_reduces_with_independent_control() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0];
        // Ranks of z are orthogonal to both rank vectors.
        let z = [4.0, 5.0, 3.0, 6.0, 6.0, 3.0, 5.0, 4.0];
        let rz = average_ranks(&z);
        assert!(pearson(&average_ranks(&x), &rz).unwrap().abs() < 1e-12);
        assert!(pearson(&average_ranks(&y), &rz).unwrap().abs() < 1e-12);
        let plain = spearman(&x, &y).unwrap().rho;
        assert!((partial_spearman(&x, &y, &z).unwrap().rho - plain).abs() < 1e-9);
        assert_eq!(
            partial_spearman(&x, &y, &x).unwrap_err(),
            StatsError::DegenerateControl
        );
    }

    #[test]
    fn cohens_h_values() {
        assert!((cohens_h(0.8, 0.5) - 0.6435).abs() < 1e-3);
        assert_eq!(cohens_h(0.3, 0.3), 0.0);
        assert!((cohens_h(1.0, 0.0) - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn sign_test_values() {
        assert_eq!(exact_sign_test(3, 3).unwrap(), 0.125);
        assert_eq!(exact_sign_test(0, 7).unwrap(), 1.0);
        assert_eq!(exact_sign_test(5, 5).unwrap(), 0.03125);
        assert!(exact_sign_test(4, 3).is_err());
    }

    #[test]
    fn wilcoxon_all_positive() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (f64::from(i) + 1.0, 1.0)).collect();
        let w = wilcoxon_signed_rank(&pairs, Transform::Identity).unwrap();
        assert_eq!(w.statistic, 0.0);
        assert_eq!(w.p_greater, 1.0 / 32.0);
        assert_eq!(w.method, PMethod::Exact);
    }

    #[test]
    fn wilcoxon_symmetric_differences() {
        let d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x, 0.0)).collect();
        let w = wilcoxon_signed_rank(&pairs, Transform::Identity).unwrap();
        assert_eq!(w.w_plus, w.w_minus);
        assert_eq!(w.p_greater, w.p_less);
        assert!(w.p_greater >= 0.5);
        assert_eq!(w.p_two_sided, 1.0);
    }

    #[test]
    fn wilcoxon_matches_brute_force_with_ties() {
        let d = [0.5, -0.5, 1.5, 2.0, -2.0, 2.0, 3.0, -0.1, 4.0];
        let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x, 0.0)).collect();
        let w = wilcoxon_signed_rank(&pairs, Transform::Identity).unwrap();
        let (ge, le) = brute_wilcoxon(&d);
        assert!((w.p_greater - ge).abs() < 1e-15);
        assert!((w.p_less - le).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_drops_zeros_and_needs_five() {
        let pairs = [(1.0, 1.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0), (5.0, 1.0)];
        assert_eq!(
            wilcoxon_signed_rank(&pairs, Transform::Identity).unwrap_err(),
            StatsError::TooFew { needed: 5, got: 4 }
        );
        assert!(wilcoxon_signed_rank(&[(0.0, 1.0); 6], Transform::LogRatio).is_err());
    }

    #[test]
    fn wilcoxon_normal_approximation_is_close_to_exact() {
        let d: Vec<f64> = (1..=21)
            .map(|i| {
                if i % 3 == 0 {
                    -f64::from(i)
                } else {
                    f64::from(i)
                }
            })
            .collect();
        let pairs: Vec<(f64, f64)> = d.iter().map(|&x| (x, 0.0)).collect();
        let w = wilcoxon_signed_rank(&pairs, Transform::Identity).unwrap();
        assert_eq!(w.method, PMethod::NormalApproximation);
        let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
        let (ge, _) = exact_wilcoxon_tails(&ranks, w.w_plus);
        assert!((w.p_greater - ge).abs() < 0.01);
    }

    #[test]
    fn paired_comparison_counts() {
        let pc = PairedComparison::new(vec![
            ("a".into(), 1.0, 0.0),
            ("b".into(), 1.0, 1.0),
            ("c".into(), 1.0, 0.0),
            ("d".into(), 1.0, 0.0),
            ("e".into(), 0.0, 0.0),
        ]);
        assert_eq!((pc.wins_a, pc.discordant), (3, 3));
        assert_eq!(pc.sign_test(), 0.125);
    }
}
