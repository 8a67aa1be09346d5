//! CSV exports. Every file opens with one `#` comment line naming the tool
//! version, the analysis and the method settings behind the numbers.

use serde::{Deserialize, Serialize};

use crate::adaptation::{BudgetLedger, TrajectoryStep};
use crate::model::{SelectionStrategy, TaskId};
use crate::scaling::{equivalent_k, EquivalentK, ScalingCurve};
use crate::selection::{QuartileBucket, RegimeLabel, StrategySummary};
use crate::stats::{Correlation, LengthControl, ProbeResult};
use crate::TOOL_VERSION;

/// `key=value` pairs rendered into the leading comment line.
#[derive(Debug, Clone, PartialEq)]
pub struct Meta {
    entries: Vec<(String, String)>,
}

impl Meta {
    pub fn new(analysis: &str) -> Self {
        Self {
            entries: vec![
                ("tool".into(), TOOL_VERSION.into()),
                ("analysis".into(), analysis.into()),
            ],
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let body: Vec<String> = self
            .entries
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!("# {}\n", body.join("; "))
    }

    /// Parses a header line produced by [`Meta::render`].
    pub fn parse(line: &str) -> Option<Self> {
        let body = line.strip_prefix("# ")?.trim_end();
        let entries = body
            .split("; ")
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(Self { entries })
    }
}

/// A rendered CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: Meta,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(meta: Meta, header: &[&str]) -> Self {
        Self {
            meta,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let body =
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input");
        self.meta.render() + &body
    }
}

/// Fixed-precision float; NaN becomes an empty cell.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

pub fn curve_table(curve: &ScalingCurve) -> Table {
    let meta = Meta::new("scaling")
        .with("estimator", "success_at_k")
        .with("ci_method", curve.ci_method.name())
        .with("ci_level", "0.95")
        .with("std", "population")
        .with("seeds", curve.seeds)
        .with("tasks", curve.tasks);
    let mut t = Table::new(meta, &["K", "mean", "std", "ci_low", "ci_high"]);
    for p in &curve.points {
        t.push(vec![
            p.k.to_string(),
            num(p.mean),
            num(p.std),
            num(p.ci_low),
            num(p.ci_high),
        ]);
    }
    t
}

pub fn equivalent_k_table(curve: &ScalingCurve, targets: &[f64]) -> Table {
    let meta = Meta::new("equivalent_k")
        .with("interpolation", "linear in log2(K)")
        .with("ci_method", curve.ci_method.name());
    let mut t = Table::new(meta, &["target", "result", "K"]);
    for &target in targets {
        let (kind, k) = match equivalent_k(curve, target) {
            EquivalentK::Exact(k) => ("exact", num(k)),
            EquivalentK::BelowK1 => ("below_k1", String::new()),
            EquivalentK::AboveKmax => ("above_kmax", String::new()),
        };
        t.push(vec![num(target), kind.into(), k]);
    }
    t
}

/// One selection decision for one `(task, seed)` unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub task_id: TaskId,
    pub seed: u64,
    pub strategy: SelectionStrategy,
    pub chosen_sample_index: Option<u32>,
    pub fast1: bool,
    pub speedup: f64,
    pub extra_evals_used: u32,
    pub regime_label: String,
}

pub fn selection_table(
    rows: &[SelectionRow],
    rng_seed: u64,
    regime_threshold: f64,
    retimed: bool,
) -> Table {
    let meta = Meta::new("selection")
        .with("random_seed", rng_seed)
        .with("regime_threshold", regime_threshold)
        .with("top3_timing", if retimed { "re-timed" } else { "recorded" })
        .with("no_correct", "chosen index empty, fast1 false");
    let mut t = Table::new(
        meta,
        &[
            "task_id",
            "seed",
            "strategy",
            "chosen_sample_index",
            "fast1",
            "speedup",
            "extra_evals_used",
            "regime_label",
        ],
    );
    for r in rows {
        t.push(vec![
            r.task_id.to_string(),
            r.seed.to_string(),
            r.strategy.name().into(),
            r.chosen_sample_index
                .map_or_else(String::new, |i| i.to_string()),
            r.fast1.to_string(),
            num(r.speedup),
            r.extra_evals_used.to_string(),
            r.regime_label.clone(),
        ]);
    }
    t
}

pub fn summary_table(summaries: &[StrategySummary]) -> Table {
    let meta = Meta::new("selection_summary")
        .with("mean_speedup", "units without a correct sample count as 0");
    let mut t = Table::new(
        meta,
        &[
            "strategy",
            "units",
            "fast1_count",
            "fast1_rate",
            "mean_speedup",
            "extra_evals",
        ],
    );
    for s in summaries {
        t.push(vec![
            s.strategy.name().into(),
            s.units.to_string(),
            s.fast1_count.to_string(),
            num(s.fast1_rate),
            num(s.mean_speedup),
            s.extra_evals.to_string(),
        ]);
    }
    t
}

/// Paired test of strategy `a` against strategy `b` over shared units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub a: SelectionStrategy,
    pub b: SelectionStrategy,
    pub units: usize,
    pub fast1_a: f64,
    pub fast1_b: f64,
    pub cohens_h: f64,
    pub wins_a: u32,
    pub discordant: u32,
    pub sign_p: f64,
    pub wilcoxon_p: Option<f64>,
}

pub fn comparison_table(rows: &[ComparisonRow]) -> Table {
    let meta = Meta::new("selection_tests")
        .with(
            "sign_test",
            "exact binomial, one-sided a > b, on fast1 discordant units",
        )
        .with(
            "wilcoxon",
            "signed-rank on ln(speedup_a / speedup_b), one-sided a > b, both speedups > 0",
        )
        .with("effect_size", "cohens_h(fast1_a, fast1_b)");
    let mut t = Table::new(
        meta,
        &[
            "strategy_a",
            "strategy_b",
            "units",
            "fast1_a",
            "fast1_b",
            "cohens_h",
            "wins_a",
            "discordant",
            "sign_p",
            "wilcoxon_p",
        ],
    );
    for r in rows {
        t.push(vec![
            r.a.name().into(),
            r.b.name().into(),
            r.units.to_string(),
            num(r.fast1_a),
            num(r.fast1_b),
            num(r.cohens_h),
            r.wins_a.to_string(),
            r.discordant.to_string(),
            num(r.sign_p),
            opt_num(r.wilcoxon_p),
        ]);
    }
    t
}

pub fn trajectory_table(steps: &[TrajectoryStep], seed: u64, selected_step: Option<u32>) -> Table {
    let tasks: Vec<TaskId> = steps
        .iter()
        .flat_map(|s| s.per_task_fast1.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut meta = Meta::new("trajectory")
        .with("seed", seed)
        .with("score", "in-batch fast1 of each step's own rollouts");
    if let Some(s) = selected_step {
        meta = meta.with("selected_step", s).with("tie_break", "earliest");
    }
    let mut header: Vec<String> = ["step", "cumulative_rollouts", "aggregate_fast1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(tasks.iter().map(|t| format!("task_{t}")));
    let mut t = Table {
        meta,
        header,
        rows: Vec::new(),
    };
    for s in steps {
        let mut row = vec![
            s.step.to_string(),
            s.cumulative_rollouts.to_string(),
            num(s.aggregate_fast1),
        ];
        row.extend(
            tasks
                .iter()
                .map(|task| opt_num(s.per_task_fast1.get(task).copied())),
        );
        t.rows.push(row);
    }
    t
}

pub fn regime_table(labels: &[(u64, RegimeLabel)], threshold: f64, min_samples: usize) -> Table {
    let meta = Meta::new("regime")
        .with("statistic", "population std of total_logprob")
        .with("threshold", threshold)
        .with("min_samples", min_samples);
    let mut t = Table::new(meta, &["task_id", "seed", "logprob_std", "regime_label"]);
    for (seed, l) in labels {
        t.push(vec![
            l.task_id.to_string(),
            seed.to_string(),
            num(l.logprob_std),
            l.label.name().into(),
        ]);
    }
    t
}

pub fn quartile_table(buckets: &[QuartileBucket; 4], pooled: usize) -> Table {
    let meta = Meta::new("quartile")
        .with(
            "ordering",
            "ascending total_logprob, Q1 = highest surprisal",
        )
        .with("pooled_samples", pooled);
    let mut t = Table::new(
        meta,
        &[
            "quartile",
            "count",
            "logprob_min",
            "logprob_max",
            "fast1_rate",
            "mean_speedup",
            "median_token_count",
        ],
    );
    for b in buckets {
        t.push(vec![
            format!("Q{}", b.quartile),
            b.count.to_string(),
            num(b.logprob_min),
            num(b.logprob_max),
            num(b.fast1_rate),
            num(b.mean_speedup),
            num(b.median_token_count),
        ]);
    }
    t
}

pub fn length_control_table(lc: &LengthControl) -> Table {
    let meta = Meta::new("length_control")
        .with("correlation", "spearman")
        .with("sidedness", "two-sided")
        .with("population", "correct samples");
    let mut t = Table::new(meta, &["measure", "rho", "p_two_sided", "n", "p_method"]);
    let mut row = |name: &str, c: Option<&Correlation>| {
        t.push(match c {
            Some(c) => vec![
                name.into(),
                num(c.rho),
                num(c.p_two_sided),
                c.n.to_string(),
                c.method.name().into(),
            ],
            None => vec![
                name.into(),
                String::new(),
                String::new(),
                lc.n.to_string(),
                "degenerate".into(),
            ],
        })
    };
    row("logprob_speedup", Some(&lc.logprob_speedup));
    row(
        "logprob_speedup_given_length",
        lc.logprob_speedup_given_length.as_ref(),
    );
    row("length_speedup", lc.length_speedup.as_ref());
    t
}

pub fn probe_table(probe: &ProbeResult) -> Table {
    let meta = Meta::new("probe")
        .with("correlation", "spearman(NLL, speedup)")
        .with("sidedness", "two-sided")
        .with("tail", "highest-NLL fraction")
        .with("tail_fraction", probe.tail_fraction)
        .with("samples", probe.n_samples);
    let mut t = Table::new(
        meta,
        &[
            "step",
            "checkpoint",
            "rho_all",
            "p_all",
            "rho_tail",
            "p_tail",
            "n_tail",
            "mean_nll",
            "rho_low_speedup",
            "p_low_speedup",
        ],
    );
    for s in &probe.per_step {
        t.push(vec![
            s.step.to_string(),
            s.checkpoint_id.clone(),
            num(s.rho_all),
            num(s.p_all),
            num(s.rho_tail),
            num(s.p_tail),
            s.n_tail.to_string(),
            num(s.mean_nll),
            opt_num(s.rho_low_speedup),
            opt_num(s.p_low_speedup),
        ]);
    }
    t
}

/// Long-format NLL matrix: one row per (checkpoint, sample) cell.
pub fn probe_matrix_table(probe: &ProbeResult, keys: &[(TaskId, u64, u32)]) -> Table {
    let meta = Meta::new("probe_nll").with("cells", probe.nll.iter().map(Vec::len).sum::<usize>());
    let mut t = Table::new(
        meta,
        &[
            "step",
            "checkpoint",
            "task_id",
            "seed",
            "sample_index",
            "nll",
        ],
    );
    for (s, row) in probe.per_step.iter().zip(&probe.nll) {
        for (&(task, seed, idx), v) in keys.iter().zip(row) {
            t.push(vec![
                s.step.to_string(),
                s.checkpoint_id.clone(),
                task.to_string(),
                seed.to_string(),
                idx.to_string(),
                num(*v),
            ]);
        }
    }
    t
}

/// A named ledger and the record file it accounts for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub arm: String,
    pub records_file: String,
    pub ledger: BudgetLedger,
}

pub fn ledger_table(entries: &[LedgerEntry]) -> Table {
    let meta = Meta::new("ledger")
        .with(
            "tokens",
            "student = sampled tokens; teacher = context estimate + scored tokens",
        )
        .with("wall_clock", "milliseconds");
    let mut t = Table::new(
        meta,
        &[
            "arm",
            "records_file",
            "rollouts",
            "student_tokens",
            "teacher_tokens",
            "total_tokens",
            "extra_timing_evals",
            "wall_clock_ms",
        ],
    );
    for e in entries {
        let l = &e.ledger;
        t.push(vec![
            e.arm.clone(),
            e.records_file.clone(),
            l.rollouts.to_string(),
            l.student_tokens.to_string(),
            l.teacher_tokens.to_string(),
            l.total_tokens().to_string(),
            l.extra_timing_evals.to_string(),
            l.wall_clock_ms.to_string(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaling::{CiMethod, CurvePoint};

    #[test]
    fn meta_round_trips() {
        let m = Meta::new("scaling").with("ci_method", "range");
        let back = Meta::parse(m.render().trim_end()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.get("ci_method"), Some("range"));
        assert!(back.get("tool").unwrap().starts_with("testtime"));
    }

    #[test]
    fn curve_csv_shape() {
        let curve = ScalingCurve {
            points: [1, 2]
                .iter()
                .map(|&k| CurvePoint {
                    k,
                    mean: 0.5,
                    std: 0.1,
                    ci_low: 0.4,
                    ci_high: 0.6,
                })
                .collect(),
            ci_method: CiMethod::Range,
            seeds: 2,
            tasks: 5,
        };
        let csv = curve_table(&curve).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# tool=testtime"));
        assert!(lines[0].contains("ci_method=range"));
        assert_eq!(lines[1], "K,mean,std,ci_low,ci_high");
        assert_eq!(lines[2], "1,0.500000,0.100000,0.400000,0.600000");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn nan_renders_empty() {
        assert_eq!(num(f64::NAN), "");
        assert_eq!(opt_num(None), "");
        assert_eq!(num(0.25), "0.250000");
    }
}
