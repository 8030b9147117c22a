use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mcd_core::sim::{SimError, Summary};
use mcd_core::{run, MetricsRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::spec::{plan_runs, ExperimentSpec, RunPlan};

/// Finished simulation with its plan.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub plan: RunPlan,
    pub metrics: MetricsRecord,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub sweep_param: String,
    pub sweep_value: String,
    pub protocol: String,
    pub seed: u64,
    pub rt_mean: f64,
    pub rt_p95: f64,
    pub pc_mean: f64,
    pub pc_listen: f64,
    pub pc_control: f64,
    pub pc_check: f64,
    pub pc_tx: f64,
    pub so_per_cycle: f64,
    pub cycle_len_mean: f64,
    pub commits: u64,
    pub rejections: u64,
    pub rereads: u64,
    pub restarts: u64,
    pub incomplete: u64,
}

impl SummaryRow {
    fn new(plan: &RunPlan, s: &Summary) -> Self {
        SummaryRow {
            experiment: plan.experiment.clone(),
            sweep_param: plan.sweep_param.clone(),
            sweep_value: plan.sweep_value.clone(),
            protocol: plan.protocol.to_string(),
            seed: plan.seed,
            rt_mean: s.rt_mean,
            rt_p95: s.rt_p95,
            pc_mean: s.pc_mean,
            pc_listen: s.pc_listen,
            pc_control: s.pc_control,
            pc_check: s.pc_check,
            pc_tx: s.pc_tx,
            so_per_cycle: s.so_per_cycle,
            cycle_len_mean: s.cycle_len_mean,
            commits: s.commits,
            rejections: s.rejections,
            rereads: s.rereads,
            restarts: s.restarts,
            incomplete: s.incomplete,
        }
    }

    /// Numeric column by name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "rt_mean" => self.rt_mean,
            "rt_p95" => self.rt_p95,
            "pc_mean" => self.pc_mean,
            "pc_listen" => self.pc_listen,
            "pc_control" => self.pc_control,
            "pc_check" => self.pc_check,
            "pc_tx" => self.pc_tx,
            "so_per_cycle" => self.so_per_cycle,
            "cycle_len_mean" => self.cycle_len_mean,
            "commits" => self.commits as f64,
            "rejections" => self.rejections as f64,
            "rereads" => self.rereads as f64,
            "restarts" => self.restarts as f64,
            "incomplete" => self.incomplete as f64,
            _ => return None,
        })
    }
}

/// Runs every planned simulation, in parallel, keeping plan order.
pub fn execute(spec: &ExperimentSpec) -> Result<Vec<RunResult>> {
    let plan = plan_runs(spec)?;
    plan.into_par_iter()
        .map(|p| {
            let out = run(p.config.clone()).map_err(|e: SimError| {
                anyhow::anyhow!("{} {} seed {} at {}={}: {e}", p.experiment, p.protocol, p.seed, p.sweep_param, p.sweep_value)
            })?;
            Ok(RunResult {
                plan: p,
                metrics: out.metrics,
            })
        })
        .collect()
}

const RUN_COLUMNS: [&str; 4] = ["experiment", "sweep_value", "protocol", "seed"];

fn run_key(p: &RunPlan) -> [String; 4] {
    [
        p.experiment.clone(),
        p.sweep_value.clone(),
        p.protocol.to_string(),
        p.seed.to_string(),
    ]
}

/// Writes summary, raw sample, cycle and plot files into `dir`.
pub fn write_outputs(dir: &Path, spec: &ExperimentSpec, results: &[RunResult]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let echo = serde_json::to_string_pretty(spec)?;
    fs::write(dir.join("config.json"), echo + "\n")
        .with_context(|| format!("cannot write into {}", dir.display()))?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in results {
        w.serialize(SummaryRow::new(&r.plan, &r.metrics.summary()))?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("samples.csv"))?;
    w.write_record(RUN_COLUMNS.iter().chain(&[
        "client", "txn", "mode", "created_tick", "committed_tick", "rt", "pc", "pc_listen",
        "pc_control", "pc_check", "pc_tx", "checks", "restarts", "rejections", "reread_items",
        "rs_size", "ws_size",
    ]))?;
    for r in results {
        let key = run_key(&r.plan);
        for s in &r.metrics.samples {
            let mode = match s.mode {
                mcd_core::client::CommitMode::Local => "local",
                mcd_core::client::CommitMode::Validated => "validated",
            };
            let fields = [
                s.client.to_string(),
                s.txn.to_string(),
                mode.to_string(),
                s.created_tick.to_string(),
                s.committed_tick.to_string(),
                s.rt.to_string(),
                s.pc.to_string(),
                s.pc_listen.to_string(),
                s.pc_control.to_string(),
                s.pc_check.to_string(),
                s.pc_tx.to_string(),
                s.checks.to_string(),
                s.restarts.to_string(),
                s.rejections.to_string(),
                s.reread_items.to_string(),
                s.rs_size.to_string(),
                s.ws_size.to_string(),
            ];
            w.write_record(key.iter().chain(&fields))?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("cycles.csv"))?;
    w.write_record(RUN_COLUMNS.iter().chain(&[
        "cycle", "start", "length", "control", "payload", "retransmission", "busy",
    ]))?;
    for r in results {
        let key = run_key(&r.plan);
        for c in &r.metrics.cycles {
            let fields = [c.cycle, c.start, c.length, c.control, c.payload, c.retransmission, c.busy]
                .map(|x| x.to_string());
            w.write_record(key.iter().chain(&fields))?;
        }
    }
    w.flush()?;

    let rows: Vec<SummaryRow> = results
        .iter()
        .map(|r| SummaryRow::new(&r.plan, &r.metrics.summary()))
        .collect();
    for metric in ["rt_mean", "pc_mean", "so_per_cycle"] {
        fs::write(dir.join(format!("plot_{metric}.dat")), plot_data(&rows, metric))?;
    }
    Ok(())
}

/// Whitespace-separated columns: sweep value, then the seed mean of
/// `metric` for each protocol.
pub fn plot_data(rows: &[SummaryRow], metric: &str) -> String {
    let mut protocols: Vec<&str> = Vec::new();
    let mut points: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<(&str, &str), (f64, u32)> = BTreeMap::new();
    for r in rows {
        if !protocols.contains(&r.protocol.as_str()) {
            protocols.push(&r.protocol);
        }
        if !points.contains(&r.sweep_value.as_str()) {
            points.push(&r.sweep_value);
        }
        let e = sums.entry((&r.sweep_value, &r.protocol)).or_default();
        e.0 += r.metric(metric).unwrap_or(f64::NAN);
        e.1 += 1;
    }
    let param = rows.first().map_or("", |r| r.sweep_param.as_str());
    let mut out = format!("# {metric}\n# {}", if param.is_empty() { "point" } else { param });
    for p in &protocols {
        out.push(' ');
        out.push_str(p);
    }
    out.push('\n');
    for x in &points {
        out.push_str(if x.is_empty() { "0" } else { x });
        for p in &protocols {
            let cell = sums
                .get(&(*x, *p))
                .map_or("nan".to_string(), |(s, n)| (s / f64::from(*n)).to_string());
            out.push(' ');
            out.push_str(&cell);
        }
        out.push('\n');
    }
    out
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .with_context(|| format!("{} does not have the summary columns", path.display()))?;
    Ok(rows)
}
