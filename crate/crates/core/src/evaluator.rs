//! Execution-grounded evaluation: compile, check correctness, time.
//!
//! [`SyntheticEvaluator`] stands in for a compile-and-time service at desk
//! scale. Candidates written by the synthetic policy carry a one-line
//! [`tag::KernelTag`] header describing how the "kernel" behaves; the evaluator
//! turns that header plus the task into an outcome with a fixed 64-bit mixing
//! function, so identical `(task_id, code, trials)` always give identical
//! outcomes. Runtimes are drawn per trial and the median is reported.
//!
//! [`RemoteEvaluator`] speaks the JSON wire contract to a real service.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::GatewayError;
use crate::hash::{mix, mix_str, std_normal, unit_f64};
use crate::model::{BackendKind, EvalOutcome, TaskId, TaskSpec};
use crate::transport::{InFlightLimit, Transport, TransportError};

/// Fast-proxy protocol trial count.
pub const FAST_PROXY_TRIALS: u32 = 5;
/// Full benchmark protocol trial count.
pub const FULL_PROTOCOL_TRIALS: u32 = 50;
/// Floor applied to measured runtimes (ms).
pub const MIN_RUNTIME_MS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRequest<'a> {
    pub task_id: TaskId,
    pub code: &'a str,
    pub trials: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorProfile {
    pub kind: BackendKind,
    pub trials_default: u32,
    pub timeout: Duration,
    /// Multiplicative half-width of per-trial timing noise (0.05 = +/-5%).
    pub jitter: f64,
}

impl Default for EvaluatorProfile {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            trials_default: FAST_PROXY_TRIALS,
            timeout: Duration::from_secs(600),
            jitter: 0.05,
        }
    }
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<EvalOutcome, GatewayError>;
    fn profile(&self) -> &EvaluatorProfile;
}

/// Reward used for adaptation: the speedup of a correct sample, else zero.
pub fn compute_reward(outcome: &EvalOutcome) -> f64 {
    if outcome.correct {
        outcome.speedup
    } else {
        0.0
    }
}

/// Correct and strictly faster than the reference.
pub fn is_fast1(outcome: &EvalOutcome) -> bool {
    outcome.correct && outcome.speedup > 1.0
}

pub mod tag {
    //! The synthetic kernel header.
    //!
    //! ```text
    //! // testtime-synth arch=0 class=naive_mode compile=0.97 correct=0.9 median=1.2 dispersion=0.3 link=0.6 z=-0.25 nonce=00000000deadbeef
    //! ```

    use std::fmt;
    use std::str::FromStr;

    use serde::{Deserialize, Serialize};

    pub const PREFIX: &str = "// testtime-synth ";

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum ArchetypeClass {
        NaiveMode,
        ExpertTail,
        Broken,
    }

    impl ArchetypeClass {
        pub fn name(self) -> &'static str {
            match self {
                ArchetypeClass::NaiveMode => "naive_mode",
                ArchetypeClass::ExpertTail => "expert_tail",
                ArchetypeClass::Broken => "broken",
            }
        }
    }

    impl FromStr for ArchetypeClass {
        type Err = String;
        fn from_str(s: &str) -> Result<Self, String> {
            match s {
                "naive_mode" => Ok(ArchetypeClass::NaiveMode),
                "expert_tail" => Ok(ArchetypeClass::ExpertTail),
                "broken" => Ok(ArchetypeClass::Broken),
                other => Err(format!("unknown archetype class '{other}'")),
            }
        }
    }

    /// Behaviour parameters of one synthetic candidate.
    #[derive(Debug, Clone, PartialEq)]
    pub struct KernelTag {
        pub arch: usize,
        pub class: ArchetypeClass,
        pub compile_rate: f64,
        pub correct_rate: f64,
        pub speedup_median: f64,
        pub speedup_dispersion: f64,
        /// How strongly typicality (high log-probability) pulls speedup down.
        pub link: f64,
        /// Typicality latent of this sample.
        pub z: f64,
        pub nonce: u64,
    }

    impl fmt::Display for KernelTag {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            write!(
                f,
                "{PREFIX}arch={} class={} compile={} correct={} median={} dispersion={} link={} z={} nonce={:016x}",
                self.arch,
                self.class.name(),
                self.compile_rate,
                self.correct_rate,
                self.speedup_median,
                self.speedup_dispersion,
                self.link,
                self.z,
                self.nonce
            )
        }
    }

    impl KernelTag {
        /// Parses the first line of `code`, if it is a tag.
        pub fn parse(code: &str) -> Option<KernelTag> {
            let line = code.lines().next()?;
            let rest = line.strip_prefix(PREFIX)?;
            let mut t = KernelTag {
                arch: usize::MAX,
                class: ArchetypeClass::Broken,
                compile_rate: f64::NAN,
                correct_rate: f64::NAN,
                speedup_median: f64::NAN,
                speedup_dispersion: f64::NAN,
                link: f64::NAN,
                z: f64::NAN,
                nonce: 0,
            };
            let mut seen = 0u16;
            for kv in rest.split_whitespace() {
                let (k, v) = kv.split_once('=')?;
                let bit = match k {
                    "arch" => {
                        t.arch = v.parse().ok()?;
                        0
                    }
                    "class" => {
                        t.class = v.parse().ok()?;
                        1
                    }
                    "compile" => {
                        t.compile_rate = v.parse().ok()?;
                        2
                    }
                    "correct" => {
                        t.correct_rate = v.parse().ok()?;
                        3
                    }
                    "median" => {
                        t.speedup_median = v.parse().ok()?;
                        4
                    }
                    "dispersion" => {
                        t.speedup_dispersion = v.parse().ok()?;
                        5
                    }
                    "link" => {
                        t.link = v.parse().ok()?;
                        6
                    }
                    "z" => {
                        t.z = v.parse().ok()?;
                        7
                    }
                    "nonce" => {
                        t.nonce = u64::from_str_radix(v, 16).ok()?;
                        8
                    }
                    _ => continue,
                };
                seen |= 1 << bit;
            }
            (seen == 0x1ff).then_some(t)
        }
    }
}

/// Deterministic stand-in for the compile/correctness/timing pipeline.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    baselines: HashMap<TaskId, f64>,
    profile: EvaluatorProfile,
}

impl SyntheticEvaluator {
    pub fn new(tasks: &[TaskSpec], profile: EvaluatorProfile) -> Self {
        Self {
            baselines: tasks.iter().map(|t| (t.task_id, t.baseline_time)).collect(),
            profile,
        }
    }

    pub fn with_tasks(task_ids: &[TaskId]) -> Self {
        let tasks: Vec<TaskSpec> = task_ids.iter().map(|&t| TaskSpec::eval(t)).collect();
        Self::new(&tasks, EvaluatorProfile::default())
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.profile.jitter = jitter;
        self
    }

    pub fn add_task(&mut self, task: &TaskSpec) {
        self.baselines.insert(task.task_id, task.baseline_time);
    }

    fn outcome(&self, task_id: TaskId, baseline: f64, code: &str, trials: u32) -> EvalOutcome {
        let Some(tag) = tag::KernelTag::parse(code) else {
            return EvalOutcome::compile_failure("error: no kernel found in candidate", trials);
        };
        let task = u64::from(task_id);
        let u = unit_f64(mix(&[task, tag.nonce, 0xC0]));
        if u >= tag.compile_rate {
            return EvalOutcome::compile_failure(
                format!("error: kernel failed to compile (task {task_id})"),
                trials,
            );
        }
        if u >= tag.correct_rate {
            return EvalOutcome::incorrect("mismatch: output differs from reference", trials);
        }
        // Quality is anti-correlated with typicality through `link`; the
        // independent part is private to the evaluator.
        let private = std_normal(mix(&[task, tag.nonce, 0xD1]), mix(&[task, tag.nonce, 0xD2]));
        let link = tag.link.clamp(-1.0, 1.0);
        let quality = -link * tag.z + (1.0 - link * link).sqrt() * private;
        let intrinsic = tag.speedup_median * (tag.speedup_dispersion * quality).exp();
        let kernel_time = baseline / intrinsic.max(f64::MIN_POSITIVE);

        let tag_hash = mix_str(code.lines().next().unwrap_or_default());
        let mut runtimes: Vec<f64> = (0..trials)
            .map(|trial| {
                let v = unit_f64(mix(&[task, tag_hash, u64::from(trial)]));
                kernel_time * (1.0 + self.profile.jitter * (2.0 * v - 1.0))
            })
            .collect();
        let runtime = median(&mut runtimes).max(MIN_RUNTIME_MS);
        EvalOutcome::correct(baseline / runtime, runtime, trials)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl Evaluator for SyntheticEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<EvalOutcome, GatewayError> {
        if request.trials == 0 {
            return Err(GatewayError::InvalidRequest("trials must be >= 1".into()));
        }
        let baseline = *self
            .baselines
            .get(&request.task_id)
            .ok_or(GatewayError::UnknownTask(request.task_id))?;
        Ok(self.outcome(request.task_id, baseline, request.code, request.trials))
    }

    fn profile(&self) -> &EvaluatorProfile {
        &self.profile
    }
}

#[derive(Debug, Deserialize)]
struct EvalResponse {
    compiled: bool,
    correct: bool,
    #[serde(default)]
    speedup: f64,
    #[serde(default)]
    runtime: f64,
    #[serde(default)]
    error_trace: Option<String>,
}

/// Client for a remote compile-and-time service (`POST evaluate`).
pub struct RemoteEvaluator {
    transport: Arc<dyn Transport>,
    limit: InFlightLimit,
    profile: EvaluatorProfile,
}

impl RemoteEvaluator {
    pub fn new(
        transport: Arc<dyn Transport>,
        profile: EvaluatorProfile,
        max_in_flight: usize,
    ) -> Self {
        Self {
            transport,
            limit: InFlightLimit::new(max_in_flight),
            profile,
        }
    }
}

impl Evaluator for RemoteEvaluator {
    fn evaluate(&self, request: &EvalRequest<'_>) -> Result<EvalOutcome, GatewayError> {
        let body = json!({
            "task_id": request.task_id,
            "code": request.code,
            "trials": request.trials,
        });
        let reply = {
            let _permit = self.limit.acquire();
            self.transport.post("evaluate", &body, self.profile.timeout)
        };
        let value = match reply {
            Ok(v) => v,
            // A timed-out evaluation still consumed its rollout.
            Err(TransportError::Timeout) => {
                return Ok(EvalOutcome::compile_failure(
                    format!(
                        "timeout: evaluation exceeded {} ms",
                        self.profile.timeout.as_millis()
                    ),
                    request.trials,
                ))
            }
            Err(TransportError::Unreachable(e)) => return Err(GatewayError::BackendUnreachable(e)),
            Err(TransportError::Protocol(e)) => return Err(GatewayError::Protocol(e)),
        };
        if value.get("error").and_then(|e| e.as_str()) == Some("unknown_task") {
            return Err(GatewayError::UnknownTask(request.task_id));
        }
        let r: EvalResponse =
            serde_json::from_value(value).map_err(|e| GatewayError::Protocol(e.to_string()))?;
        if r.correct && !r.compiled {
            return Err(GatewayError::Protocol(
                "correct=true with compiled=false".into(),
            ));
        }
        if !(r.speedup >= 0.0 && r.runtime >= 0.0) {
            return Err(GatewayError::Protocol("negative speedup or runtime".into()));
        }
        Ok(EvalOutcome {
            compiled: r.compiled,
            correct: r.correct,
            speedup: if r.correct { r.speedup } else { 0.0 },
            runtime: r.runtime,
            error_trace: r.error_trace,
            trials: request.trials.max(1),
        })
    }

    fn profile(&self) -> &EvaluatorProfile {
        &self.profile
    }
}

#[cfg(test)]
mod tests {
    use super::tag::{ArchetypeClass, KernelTag};
    use super::*;

    fn tag(correct_rate: f64, median: f64, dispersion: f64, nonce: u64) -> String {
        let t = KernelTag {
            arch: 0,
            class: ArchetypeClass::NaiveMode,
            compile_rate: 1.0,
            correct_rate,
            speedup_median: median,
            speedup_dispersion: dispersion,
            link: 0.0,
            z: 0.0,
            nonce,
        };
        format!("{t}\n__global__ void k() {{}}\n")
    }

    fn req(code: &str) -> EvalRequest<'_> {
        EvalRequest {
            task_id: 4,
            code,
            trials: 5,
        }
    }

    #[test]
    fn tag_round_trips() {
        let t = KernelTag {
            arch: 2,
            class: ArchetypeClass::ExpertTail,
            compile_rate: 0.8,
            correct_rate: 0.5,
            speedup_median: 20.0,
            speedup_dispersion: 0.5,
            link: 0.6,
            z: -1.234_567_890_123,
            nonce: 0xdead_beef,
        };
        let parsed = KernelTag::parse(&format!("{t}\nbody")).unwrap();
        assert_eq!(parsed, t);
        assert!(KernelTag::parse("int main() {}").is_none());
        assert!(KernelTag::parse("// testtime-synth arch=1").is_none());
    }

    #[test]
    fn fast_correct_candidate() {
        let ev = SyntheticEvaluator::with_tasks(&[4]);
        let code = tag(1.0, 3.0, 0.0, 7);
        let o = ev.evaluate(&req(&code)).unwrap();
        assert!(o.correct && o.compiled);
        assert!(o.speedup > 1.0);
        assert!((o.speedup - 3.0).abs() < 3.0 * 0.06);
        assert!(is_fast1(&o));
    }

    #[test]
    fn non_compiling_candidate() {
        let ev = SyntheticEvaluator::with_tasks(&[4]);
        let o = ev.evaluate(&req("garbage")).unwrap();
        assert!(!o.compiled && !o.correct);
        assert_eq!(o.speedup, 0.0);
        assert!(o.error_trace.is_some());
    }

    #[test]
    fn reference_speed_kernel_is_not_fast() {
        let ev = SyntheticEvaluator::with_tasks(&[4]).with_jitter(0.0);
        let code = tag(1.0, 1.0, 0.0, 11);
        let o = ev.evaluate(&req(&code)).unwrap();
        assert!(o.correct);
        assert_eq!(o.speedup, 1.0);
        assert!(!is_fast1(&o));
    }

    #[test]
    fn deterministic_and_unknown_task() {
        let ev = SyntheticEvaluator::with_tasks(&[4]);
        let code = tag(0.5, 2.0, 0.4, 99);
        assert_eq!(
            ev.evaluate(&req(&code)).unwrap(),
            ev.evaluate(&req(&code)).unwrap()
        );
        let err = ev
            .evaluate(&EvalRequest {
                task_id: 5,
                code: &code,
                trials: 5,
            })
            .unwrap_err();
        assert_eq!(err, GatewayError::UnknownTask(5));
    }

    #[test]
    fn reward_and_fast1() {
        assert_eq!(compute_reward(&EvalOutcome::correct(3.2, 1.0, 5)), 3.2);
        assert_eq!(compute_reward(&EvalOutcome::incorrect("x", 5)), 0.0);
        assert_eq!(compute_reward(&EvalOutcome::correct(0.5, 1.0, 5)), 0.5);
        assert!(!is_fast1(&EvalOutcome::correct(1.0, 1.0, 5)));
        assert!(is_fast1(&EvalOutcome::correct(1.22, 1.0, 5)));
        let mut weird = EvalOutcome::incorrect("x", 5);
        weird.speedup = 5.0;
        assert!(!is_fast1(&weird));
    }

    #[test]
    fn median_is_reported() {
        let mut xs = vec![5.0, 1.0, 3.0];
        assert_eq!(median(&mut xs), 3.0);
        let mut xs = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&mut xs), 2.5);
    }

    #[test]
    fn outcomes_respect_the_chain() {
        let ev = SyntheticEvaluator::with_tasks(&[4]);
        for nonce in 0..500 {
            let code = tag(0.5, 1.1, 0.6, nonce);
            let o = ev.evaluate(&req(&code)).unwrap();
            assert!(o.is_consistent());
            if o.correct {
                assert!(compute_reward(&o) > 0.0);
            }
            if is_fast1(&o) {
                assert!(compute_reward(&o) > 1.0);
            }
        }
    }
}
