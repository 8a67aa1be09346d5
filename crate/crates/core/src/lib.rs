//! Test-time compute allocation for execution-grounded code generation.
//!
//! The crate runs Best-of-N sampling campaigns and Best-of-Adaptation
//! checkpoint loops against pluggable policy and evaluator backends, then
//! applies selection strategies and statistical probes to the results.
//!
//! Layout:
//!
//! * [`model`] and [`records`]: shared domain types, config validation and the
//!   line-delimited run-record format.
//! * [`evaluator`]: the execution-grounded evaluation contract and its
//!   synthetic and remote implementations.
//! * [`policy`]: sampling, NLL scoring and adaptation over checkpoints.
//! * [`selection`], [`scaling`], [`stats`]: post-hoc analysis.
//! * [`adaptation`]: BoA loops, SDPO advantages, budget parity, transfer.
//! * [`campaign`] and [`report`]: campaign execution, persistence and CSV exports.

// NaN-rejecting range checks read best as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod campaign;
mod clock;
pub mod error;
pub mod evaluator;
pub mod hash;
pub mod model;
mod parallel;
pub mod policy;
pub mod records;
pub mod report;
pub mod scaling;
pub mod selection;
pub mod stats;
pub mod transport;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{GatewayError, StatsError};
pub use model::{
    BackendKind, CampaignConfig, Candidate, CheckpointRef, EvalOutcome, Mode, SampleRecord,
    SelectionStrategy, TaskId, TaskSpec,
};

/// Version string written into export headers and manifests.
pub const TOOL_VERSION: &str = concat!("testtime ", env!("CARGO_PKG_VERSION"));
