//! Parameters of the synthetic sharpening policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluator::tag::ArchetypeClass;
use crate::model::TaskId;

const STOCK: &str = include_str!("../../fixtures/stock_scenario.json");

/// One solution strategy a task's samples can come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub class: ArchetypeClass,
    pub weight: f64,
    pub mean_logprob: f64,
    pub logprob_spread: f64,
    pub correct_rate: f64,
    #[serde(default = "one")]
    pub compile_rate: f64,
    pub speedup_median: f64,
    pub speedup_dispersion: f64,
    #[serde(default = "default_tokens")]
    pub mean_tokens: f64,
}

fn one() -> f64 {
    1.0
}

fn default_tokens() -> f64 {
    960.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub archetypes: Vec<Archetype>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Multiplier turning a learning rate into the exponential-weights step.
    pub lr_gain: f64,
    /// Per-update contraction of every archetype's logprob spread.
    pub sharpening_factor: f64,
    /// Per-update shift of the typicality latent toward the mode.
    pub mode_drift: f64,
    /// Share of a task's batch an archetype needs before its mean reward moves
    /// its weight.
    pub support_fraction: f64,
    /// Correlation between typicality and slowness inside an archetype.
    pub link: f64,
    pub default_task: TaskProfile,
    #[serde(default)]
    pub tasks: BTreeMap<TaskId, TaskProfile>,
}

impl Scenario {
    pub fn stock() -> Self {
        let s: Scenario = serde_json::from_str(STOCK).expect("stock scenario parses");
        debug_assert!(s.validate().is_empty());
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let problems = s.validate();
        if problems.is_empty() {
            Ok(s)
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn profile(&self, task_id: TaskId) -> &TaskProfile {
        self.tasks.get(&task_id).unwrap_or(&self.default_task)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr_gain >= 0.0) {
            v.push("lr_gain must be >= 0".into());
        }
        if !(self.sharpening_factor > 0.0 && self.sharpening_factor <= 1.0) {
            v.push("sharpening_factor must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.support_fraction) {
            v.push("support_fraction must be in [0, 1]".into());
        }
        if !(-1.0..=1.0).contains(&self.link) {
            v.push("link must be in [-1, 1]".into());
        }
        let profiles = std::iter::once((None, &self.default_task))
            .chain(self.tasks.iter().map(|(t, p)| (Some(*t), p)));
        for (task, p) in profiles {
            let label = task.map_or("default".to_string(), |t| format!("task {t}"));
            if p.archetypes.is_empty() {
                v.push(format!("{label}: no archetypes"));
                continue;
            }
            let total: f64 = p.archetypes.iter().map(|a| a.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                v.push(format!("{label}: weights sum to {total}"));
            }
            for (i, a) in p.archetypes.iter().enumerate() {
                if !(0.0..=1.0).contains(&a.weight)
                    || !(0.0..=1.0).contains(&a.correct_rate)
                    || !(0.0..=1.0).contains(&a.compile_rate)
                {
                    v.push(format!("{label}: archetype {i} rate outside [0, 1]"));
                }
                if a.mean_logprob > 0.0 || a.logprob_spread < 0.0 {
                    v.push(format!(
                        "{label}: archetype {i} needs mean_logprob <= 0, spread >= 0"
                    ));
                }
                if !(a.speedup_median > 0.0)
                    || a.speedup_dispersion < 0.0
                    || !(a.mean_tokens >= 1.0)
                {
                    v.push(format!(
                        "{label}: archetype {i} has an invalid speedup law or length"
                    ));
                }
            }
            if !tail_below_mode(p.archetypes.iter().map(|a| (a.class, a.mean_logprob))) {
                v.push(format!(
                    "{label}: expert_tail must sit below every naive_mode in logprob"
                ));
            }
        }
        v
    }
}

/// True when every expert-tail logprob is strictly below every naive-mode one.
pub(crate) fn tail_below_mode(items: impl Iterator<Item = (ArchetypeClass, f64)>) -> bool {
    let mut lowest_mode = f64::INFINITY;
    let mut highest_tail = f64::NEG_INFINITY;
    for (class, lp) in items {
        match class {
            ArchetypeClass::NaiveMode => lowest_mode = lowest_mode.min(lp),
            ArchetypeClass::ExpertTail => highest_tail = highest_tail.max(lp),
            ArchetypeClass::Broken => {}
        }
    }
    highest_tail < lowest_mode
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_is_valid() {
        let s = Scenario::stock();
        assert!(s.validate().is_empty(), "{:?}", s.validate());
        let p = s.profile(9999);
        assert_eq!(p.archetypes.len(), 3);
        let naive = &p.archetypes[0];
        assert_eq!(naive.class, ArchetypeClass::NaiveMode);
        assert_eq!(naive.weight, 0.80);
        assert_eq!(naive.mean_logprob, -45.0);
    }

    #[test]
    fn rejects_tail_above_mode() {
        let mut s = Scenario::stock();
        s.default_task.archetypes[1].mean_logprob = -10.0;
        assert!(s.validate().iter().any(|m| m.contains("expert_tail")));
    }

    #[test]
    fn rejects_bad_weights() {
        let mut s = Scenario::stock();
        s.default_task.archetypes[0].weight = 0.5;
        assert!(!s.validate().is_empty());
    }
}
