//! Browser bindings over `testtime-core`.
//!
//! Every export takes plain strings or numbers and returns a JSON string, so
//! the same functions run natively in tests and behind `wasm-bindgen` in the
//! page.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};
use testtime_core::adaptation::{collect_batch, run_boa, Backends, LoopConfig, UpdateRule};
use testtime_core::evaluator::tag::ArchetypeClass;
use testtime_core::evaluator::SyntheticEvaluator;
use testtime_core::model::{SelectionStrategy, TaskId};
use testtime_core::policy::{PolicyGateway, SyntheticPolicy};
use testtime_core::records::{group_by_task_seed, read_records, write_records};
use testtime_core::scaling::{
    build_curve_from_counts, equivalent_k, CellCount, CiMethod, EquivalentK,
};
use testtime_core::selection::{expected_random_fast1, select, summarize};
use wasm_bindgen::prelude::*;

/// Tasks the synthetic demos sample from.
pub const DEMO_TASKS: [TaskId; 5] = [4, 5, 12, 14, 15];

fn parse_ks(ks: &str) -> Result<Vec<u32>, String> {
    ks.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| format!("bad K '{s}'")))
        .collect()
}

/// Parses `task seed n c` lines; blank lines and `#` comments are skipped.
fn parse_cells(text: &str) -> Result<Vec<CellCount>, String> {
    let mut cells = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<u64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format!("line {}: expected four integers", i + 1))?;
        let [task, seed, n, c] = nums[..] else {
            return Err(format!("line {}: expected 'task seed n c'", i + 1));
        };
        let narrow =
            |v: u64| u32::try_from(v).map_err(|_| format!("line {}: {v} too large", i + 1));
        cells.push(CellCount {
            task_id: narrow(task)?,
            seed,
            n: narrow(n)?,
            c: narrow(c)?,
        });
    }
    if cells.is_empty() {
        return Err("no cells given".into());
    }
    Ok(cells)
}

/// Scaling curve from per-cell fast counts, plus the equivalent K of `target`
/// when it lies in (0, 1].
#[wasm_bindgen]
pub fn scaling_curve(cells: &str, ks: &str, target: f64) -> Result<String, String> {
    let cells = parse_cells(cells)?;
    let ks = parse_ks(ks)?;
    let curve =
        build_curve_from_counts(&cells, &ks, CiMethod::Auto, 0).map_err(|e| e.to_string())?;
    let eq = (target > 0.0 && target <= 1.0).then(|| match equivalent_k(&curve, target) {
        EquivalentK::Exact(k) => json!({ "kind": "exact", "K": k }),
        EquivalentK::BelowK1 => json!({ "kind": "below_k1" }),
        EquivalentK::AboveKmax => json!({ "kind": "above_kmax" }),
    });
    Ok(json!({ "curve": curve, "equivalent_k": eq }).to_string())
}

/// Runs every selection strategy over JSONL records, one unit per
/// `(task, seed)`.
#[wasm_bindgen]
pub fn select_records(jsonl: &str, seed: u32) -> Result<String, String> {
    let records = read_records(jsonl.as_bytes()).map_err(|e| e.to_string())?;
    if records.is_empty() {
        return Err("no records".into());
    }
    let groups = group_by_task_seed(&records);
    let mut by_strategy: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    let mut units = Vec::new();
    for ((task, unit_seed), samples) in &groups {
        let mut picks = serde_json::Map::new();
        for s in SelectionStrategy::ALL {
            let r = select(s, samples, u64::from(seed), None).map_err(|e| e.to_string())?;
            picks.insert(
                s.name().into(),
                json!({ "index": r.chosen_index(), "fast1": r.fast1, "speedup": r.speedup }),
            );
            by_strategy.entry(s.name()).or_default().push(r);
        }
        units.push(json!({
            "task_id": task,
            "seed": unit_seed,
            "samples": samples.len(),
            "expected_random_fast1": expected_random_fast1(samples),
            "picks": picks,
        }));
    }
    let summaries: Vec<Value> = SelectionStrategy::ALL
        .iter()
        .map(|&s| {
            let refs: Vec<_> = by_strategy[s.name()].iter().collect();
            json!(summarize(s, &refs))
        })
        .collect();
    Ok(json!({ "summaries": summaries, "units": units }).to_string())
}

fn demo_backends() -> (Arc<SyntheticPolicy>, Backends) {
    let policy = Arc::new(SyntheticPolicy::stock());
    let backends = Backends {
        policy: PolicyGateway::new(policy.clone()),
        evaluator: Arc::new(SyntheticEvaluator::with_tasks(&DEMO_TASKS)),
    };
    (policy, backends)
}

/// One Best-of-N batch from the stock synthetic policy, as JSONL.
#[wasm_bindgen]
pub fn demo_records(seed: u32, k: u32) -> Result<String, String> {
    let (_, backends) = demo_backends();
    let root = backends.policy.root("base").map_err(|e| e.to_string())?;
    let (records, _, err) = collect_batch(
        &backends,
        &root,
        &DEMO_TASKS,
        k,
        u64::from(seed),
        0.25,
        1024,
        5,
        None,
    );
    if let Some(e) = err {
        return Err(e.to_string());
    }
    let mut out = Vec::new();
    write_records(&mut out, &records).map_err(|e| e.to_string())?;
    String::from_utf8(out).map_err(|e| e.to_string())
}

/// Adaptation loop on the stock synthetic policy: per-step batch score and
/// expert-tail mass, plus the step Best-of-Adaptation keeps.
#[wasm_bindgen]
pub fn simulate_adaptation(
    seed: u32,
    k: u32,
    steps: u32,
    learning_rate: f64,
) -> Result<String, String> {
    if k == 0 || k > 256 {
        return Err("K must be in 1..=256".into());
    }
    if steps == 0 || steps > 20 {
        return Err("steps must be in 1..=20".into());
    }
    let (policy, backends) = demo_backends();
    let root = backends.policy.root("base").map_err(|e| e.to_string())?;
    let config = LoopConfig {
        tasks: DEMO_TASKS.to_vec(),
        k,
        steps,
        learning_rate,
        temperature: 0.25,
        max_tokens: 1024,
        seed: u64::from(seed),
        trials: 5,
        workers: None,
        update: UpdateRule::Reward,
    };
    let run = run_boa(&config, &root, &backends).map_err(|e| e.to_string())?;
    let mut steps_out = Vec::new();
    for s in &run.trajectory {
        let mut mass = 0.0;
        for &t in &DEMO_TASKS {
            mass += policy
                .class_mass(&s.checkpoint, t, ArchetypeClass::ExpertTail)
                .map_err(|e| e.to_string())?;
        }
        steps_out.push(json!({
            "step": s.step,
            "fast1": s.aggregate_fast1,
            "expert_mass": mass / DEMO_TASKS.len() as f64,
            "rollouts": s.cumulative_rollouts,
        }));
    }
    Ok(json!({ "steps": steps_out, "selected_step": run.selected_step }).to_string())
}
