//! Experiment runner for the dissemination simulator: JSON experiment specs,
//! parallel sweeps, CSV output and trend reports.

pub mod output;
pub mod report;
pub mod spec;

use std::path::Path;

use anyhow::{Context, Result};
use mcd_core::sim::oracle::{lock_replay_oracle, serializability_oracle, SnapshotMode};
use mcd_core::sim::to_jsonl;
use mcd_core::{run, ProtocolId, SimConfig};

pub use output::{execute, write_outputs, RunResult, SummaryRow};
pub use report::{builtin_assertions, cmd_report, evaluate, AssertionResult, TrendAssertion, TrendKind, Verdict};
pub use spec::{apply_preset, parse_config, parse_config_str, plan_runs, ExperimentSpec, SpecError};

/// Runs every planned simulation of `spec` and writes the CSVs into `out`.
pub fn cmd_sweep(spec: &ExperimentSpec, out: &Path) -> Result<Vec<RunResult>> {
    let results = execute(spec)?;
    write_outputs(out, spec, &results)?;
    Ok(results)
}

/// Outcome of the correctness oracles on one traced run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCheck {
    pub records: usize,
    pub commits: usize,
    pub serializable: Result<(), String>,
    pub locks: Result<(), String>,
}

impl TraceCheck {
    pub fn passed(&self) -> bool {
        self.serializable.is_ok() && self.locks.is_ok()
    }
}

/// Which consistent states a protocol's read-only commits are checked
/// against.
pub fn snapshot_mode(p: ProtocolId) -> SnapshotMode {
    if p == ProtocolId::Fresh {
        SnapshotMode::Instant
    } else {
        SnapshotMode::CycleBoundary
    }
}

/// Runs `config` with tracing on, writes the JSONL trace and checks it.
pub fn cmd_trace(config: &SimConfig, out: &Path) -> Result<TraceCheck> {
    let cfg = SimConfig {
        trace: true,
        ..config.clone()
    };
    let run_out = run(cfg)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(out, to_jsonl(&run_out.trace)).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(TraceCheck {
        records: run_out.trace.len(),
        commits: run_out.commits.len(),
        serializable: serializability_oracle(&run_out.db, &run_out.commits, snapshot_mode(config.protocol))
            .map_err(|v| format!("txn {}: {}", v.txn, v.detail)),
        locks: lock_replay_oracle(&run_out.lock_log).map_err(|v| format!("txn {}: {}", v.txn, v.detail)),
    })
}
