use serde::{Deserialize, Serialize};

use crate::client::MtSample;
use crate::{Cycle, Tick};

/// Per-cycle channel accounting, summed over channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSample {
    pub cycle: Cycle,
    pub start: Tick,
    /// Ticks until the next cycle start.
    pub length: u64,
    /// Index, header or matrix units.
    pub control: u64,
    /// Cyclic item units, including fresh item headers.
    pub payload: u64,
    /// Fresh interrupt retransmission units.
    pub retransmission: u64,
    /// Ticks in which some channel was transmitting, per channel.
    pub busy: u64,
}

impl CycleSample {
    pub fn space_overhead(&self) -> u64 {
        self.control + self.retransmission
    }
}

/// Raw samples of one run. Aggregates are always recomputed from them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub samples: Vec<MtSample>,
    pub cycles: Vec<CycleSample>,
    /// Transactions still running when the horizon was reached.
    pub incomplete: u64,
}

/// Aggregates of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
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

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile.
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

impl MetricsRecord {
    pub fn summary(&self) -> Summary {
        let col = |f: fn(&MtSample) -> f64| self.samples.iter().map(f).collect::<Vec<_>>();
        let rt = col(|s| s.rt);
        let so: Vec<f64> = self.cycles.iter().map(|c| c.space_overhead() as f64).collect();
        let len: Vec<f64> = self.cycles.iter().map(|c| c.length as f64).collect();
        Summary {
            rt_mean: mean(&rt),
            rt_p95: percentile(&rt, 95.0),
            pc_mean: mean(&col(|s| s.pc)),
            pc_listen: mean(&col(|s| s.pc_listen)),
            pc_control: mean(&col(|s| s.pc_control)),
            pc_check: mean(&col(|s| s.pc_check)),
            pc_tx: mean(&col(|s| s.pc_tx)),
            so_per_cycle: mean(&so),
            cycle_len_mean: mean(&len),
            commits: self.samples.len() as u64,
            rejections: self.samples.iter().map(|s| u64::from(s.rejections)).sum(),
            rereads: self.samples.iter().map(|s| s.reread_items).sum(),
            restarts: self.samples.iter().map(|s| u64::from(s.restarts)).sum(),
            incomplete: self.incomplete,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&xs, 95.0), 19.0);
        assert_eq!(percentile(&xs, 100.0), 20.0);
        assert_eq!(percentile(&[7.0], 95.0), 7.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }

    #[test]
    fn empty_record_summarises_to_zero() {
        let s = MetricsRecord::default().summary();
        assert_eq!(s, Summary::default());
    }
}
