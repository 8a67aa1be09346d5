//! The `testtime` command line.
//!
//! Exit codes: 0 ok, 2 config error, 3 backend error (including campaigns
//! that finished with failed rollouts), 4 analysis error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::campaign::{
    build_backends, cmd_analyze, cmd_report, cmd_run, cmd_select, load_config, AnalysisKind,
    AnalysisOptions, CampaignError, RunSummary, BACKEND_URL_ENV, RECORDS_FILE,
};
use crate::model::{CampaignConfig, Mode, SelectionStrategy};
use crate::scaling::CiMethod;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_ANALYSIS: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "testtime",
    version,
    about = "Test-time compute campaigns and analyses"
)]
pub struct Cli {
    /// Remote backend base URL; overrides `backend.endpoint`.
    #[arg(long, global = true, env = BACKEND_URL_ENV)]
    pub backend_url: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute a campaign config end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply selection strategies to a record file.
    Select {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated strategy names; all five when omitted.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<SelectionStrategy>,
        /// Seed of the random-correct baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn records, trajectories, probes or ledgers into CSV exports.
    Analyze {
        #[arg(long)]
        analysis: String,
        /// Input file: records (.jsonl), trajectory/probe/ledger (.json).
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "auto")]
        ci_method: CiMethod,
        #[arg(long)]
        tail_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// fast1 level to invert on the scaling curve (repeatable).
        #[arg(long = "target")]
        targets: Vec<f64>,
    },
    /// Run a config in probe mode: score the step-0 samples under every checkpoint.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        tail_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Audit a run directory and rewrite its ledger CSV.
    Report {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn fail(e: &CampaignError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn prepare(mut config: CampaignConfig, seed: Option<u64>) -> CampaignConfig {
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    config
}

fn print_run(summary: &RunSummary) -> i32 {
    let m = &summary.manifest;
    println!("campaign {} ({})", m.campaign_id, m.config.mode.name());
    println!("records: {} in {RECORDS_FILE}", m.record_count);
    for l in &summary.ledgers {
        println!(
            "ledger {}: rollouts {} student_tokens {} teacher_tokens {}",
            l.arm, l.ledger.rollouts, l.ledger.student_tokens, l.ledger.teacher_tokens
        );
    }
    for s in &m.selected {
        match s.task_id {
            Some(t) => println!(
                "seed {} task {t}: selected step {} fast1 {:.4}",
                s.seed, s.step, s.fast1
            ),
            None => println!(
                "seed {}: selected step {} fast1 {:.4}",
                s.seed, s.step, s.fast1
            ),
        }
    }
    for s in &summary.selection {
        println!(
            "{}: fast1 {}/{} mean_speedup {:.4}",
            s.strategy.name(),
            s.fast1_count,
            s.units,
            s.mean_speedup
        );
    }
    if m.complete {
        EXIT_OK
    } else {
        for e in &m.errors {
            eprintln!("incomplete: {e}");
        }
        EXIT_BACKEND
    }
}

fn run_config(config: CampaignConfig, out_dir: &std::path::Path, url: Option<&str>) -> i32 {
    let backends = match build_backends(&config, url) {
        Ok(b) => b,
        Err(e) => return fail(&e),
    };
    match cmd_run(&config, &backends, out_dir) {
        Ok(summary) => print_run(&summary),
        Err(e) => fail(&e),
    }
}

/// Parses `args` (program name first) and executes; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let url = cli.backend_url.as_deref();
    match cli.command {
        Command::Run {
            config,
            out_dir,
            seed,
        } => match load_config(&config) {
            Ok(c) => run_config(prepare(c, seed), &out_dir, url),
            Err(e) => fail(&e),
        },
        Command::Probe {
            config,
            out_dir,
            tail_fraction,
            seed,
        } => match load_config(&config) {
            Ok(c) => {
                let mut c = prepare(c, seed);
                c.mode = Mode::Probe;
                c.transfer_tasks.clear();
                if let Some(t) = tail_fraction {
                    c.tail_fraction = t;
                }
                c.rollout_budget = c.planned_rollouts();
                run_config(c, &out_dir, url)
            }
            Err(e) => fail(&e),
        },
        Command::Select {
            records,
            out_dir,
            strategies,
            seed,
        } => {
            let strategies = if strategies.is_empty() {
                SelectionStrategy::ALL.to_vec()
            } else {
                strategies
            };
            match cmd_select(&records, &strategies, seed, &out_dir) {
                Ok(out) => {
                    for s in &out.summaries {
                        println!(
                            "{}: fast1 {}/{} ({:.1}%) mean_speedup {:.4}",
                            s.strategy.name(),
                            s.fast1_count,
                            s.units,
                            100.0 * s.fast1_rate,
                            s.mean_speedup
                        );
                    }
                    EXIT_OK
                }
                Err(e) => fail(&e),
            }
        }
        Command::Analyze {
            analysis,
            records,
            out_dir,
            ci_method,
            tail_fraction,
            seed,
            targets,
        } => {
            let kind: AnalysisKind = match analysis.parse() {
                Ok(k) => k,
                Err(e) => return fail(&e),
            };
            let opts = AnalysisOptions {
                ci_method,
                seed,
                tail_fraction,
                targets,
                ..AnalysisOptions::default()
            };
            match cmd_analyze(kind, &records, &out_dir, &opts) {
                Ok(paths) => {
                    for p in paths {
                        println!("wrote {}", p.display());
                    }
                    EXIT_OK
                }
                Err(e) => fail(&e),
            }
        }
        Command::Report { out_dir } => match cmd_report(&out_dir) {
            Ok(r) => {
                for l in &r.ledgers {
                    println!(
                        "{} [{}]: rollouts {} student_tokens {} teacher_tokens {} total {}",
                        l.arm,
                        l.records_file,
                        l.ledger.rollouts,
                        l.ledger.student_tokens,
                        l.ledger.teacher_tokens,
                        l.ledger.total_tokens()
                    );
                }
                if r.ok() {
                    println!("reconciled: {} records", r.manifest.record_count);
                    EXIT_OK
                } else {
                    for i in &r.issues {
                        eprintln!("mismatch: {i}");
                    }
                    EXIT_ANALYSIS
                }
            }
            Err(e) => fail(&e),
        },
    }
}
