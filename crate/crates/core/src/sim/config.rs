use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{PowerParams, WorkloadConfig};
use crate::model::FrameLayout;
use crate::protocols::{ControlConfig, ProtocolId};
use crate::server::assign_channels;
use crate::ItemId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid value for `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

fn bad(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalMode {
    /// Each client's first transaction exists at tick 0; the next one starts
    /// as soon as the previous commits.
    Start,
    /// Exponential think time before every transaction.
    Poisson,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub protocol: ProtocolId,
    pub seed: u64,
    pub n_items: usize,
    pub item_size: u32,
    /// Per-item sizes; overrides `item_size` when present.
    pub item_sizes: Option<Vec<u32>>,
    pub n_channels: u32,
    /// Items per channel per cycle; `None` broadcasts the whole group.
    pub items_per_cycle: Option<usize>,
    pub n_clients: usize,
    pub mts_per_client: u32,
    pub arrival: ArrivalMode,
    pub mean_interarrival_ticks: f64,
    pub rs_min: usize,
    pub rs_max: usize,
    pub write_prob: f64,
    pub zipf_theta: Option<f64>,
    /// 1-based position in channel 0's cycle of the single item every
    /// transaction reads.
    pub fixed_position: Option<u32>,
    /// Per-item per-cycle update probability.
    pub update_rate: f64,
    pub p_listen: f64,
    pub p_check: f64,
    pub p_tx: f64,
    pub include_tx: bool,
    pub header_units: u32,
    pub entry_units: u32,
    pub cell_bits: u32,
    pub unit_bits: u32,
    pub backchannel_latency_ticks: u64,
    pub validation_ticks: u64,
    pub lock_timeout_cycles: f64,
    pub single_tuner: bool,
    pub horizon_cycles: Option<u64>,
    pub horizon_ticks: Option<u64>,
    pub trace: bool,
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            protocol: ProtocolId::Mcd,
            seed: 1,
            n_items: 100,
            item_size: 16,
            item_sizes: None,
            n_channels: 1,
            items_per_cycle: None,
            n_clients: 10,
            mts_per_client: 1,
            arrival: ArrivalMode::Start,
            mean_interarrival_ticks: 100.0,
            rs_min: 1,
            rs_max: 5,
            write_prob: 0.0,
            zipf_theta: None,
            fixed_position: None,
            update_rate: 0.1,
            p_listen: 1.0,
            p_check: 0.1,
            p_tx: 5.0,
            include_tx: true,
            header_units: 2,
            entry_units: 2,
            cell_bits: 1,
            unit_bits: 32,
            backchannel_latency_ticks: 10,
            validation_ticks: 1,
            lock_timeout_cycles: 2.0,
            single_tuner: false,
            horizon_cycles: Some(20),
            horizon_ticks: None,
            trace: false,
            check_invariants: true,
        }
    }
}

fn probability(field: &'static str, p: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(bad(field, format!("{p} is not a probability")))
    }
}

fn non_negative(field: &'static str, x: f64) -> Result<(), ConfigError> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("{x} must be a finite non-negative number")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_items == 0 {
            return Err(bad("n_items", "must be at least 1"));
        }
        if self.n_channels == 0 {
            return Err(bad("n_channels", "must be at least 1"));
        }
        if self.n_channels as usize > self.n_items {
            return Err(bad("n_channels", "more channels than items"));
        }
        if self.n_clients == 0 {
            return Err(bad("n_clients", "must be at least 1"));
        }
        if self.mts_per_client == 0 {
            return Err(bad("mts_per_client", "must be at least 1"));
        }
        match &self.item_sizes {
            Some(sizes) => {
                if sizes.len() != self.n_items {
                    return Err(bad("item_sizes", "needs exactly n_items entries"));
                }
                if sizes.contains(&0) {
                    return Err(bad("item_sizes", "sizes must be at least 1"));
                }
            }
            None if self.item_size == 0 => return Err(bad("item_size", "must be at least 1")),
            None => {}
        }
        if self.items_per_cycle == Some(0) {
            return Err(bad("items_per_cycle", "must be at least 1"));
        }
        if self.fixed_position.is_none() {
            if self.rs_min == 0 {
                return Err(bad("rs_min", "must be at least 1"));
            }
            if self.rs_max < self.rs_min {
                return Err(bad("rs_max", "must be at least rs_min"));
            }
            if self.rs_max > self.n_items {
                return Err(bad("rs_max", "exceeds n_items"));
            }
        }
        if let Some(p) = self.fixed_position {
            let group0 = self.n_items.div_ceil(self.n_channels as usize);
            if p == 0 || p as usize > group0 {
                return Err(bad(
                    "fixed_position",
                    format!("must be in 1..={group0} (items on channel 0)"),
                ));
            }
        }
        probability("write_prob", self.write_prob)?;
        probability("update_rate", self.update_rate)?;
        if let Some(t) = self.zipf_theta {
            non_negative("zipf_theta", t)?;
        }
        non_negative("p_listen", self.p_listen)?;
        non_negative("p_check", self.p_check)?;
        non_negative("p_tx", self.p_tx)?;
        non_negative("lock_timeout_cycles", self.lock_timeout_cycles)?;
        if !(self.mean_interarrival_ticks > 0.0 && self.mean_interarrival_ticks.is_finite()) {
            return Err(bad("mean_interarrival_ticks", "must be positive"));
        }
        if self.unit_bits == 0 {
            return Err(bad("unit_bits", "must be at least 1"));
        }
        if self.cell_bits == 0 {
            return Err(bad("cell_bits", "must be at least 1"));
        }
        if self.protocol == ProtocolId::Fresh && self.write_prob > 0.0 {
            return Err(bad("write_prob", "the fresh protocol is read-only"));
        }
        if self.horizon_cycles.is_none() && self.horizon_ticks.is_none() {
            return Err(bad("horizon_cycles", "set horizon_cycles or horizon_ticks"));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.item_sizes
            .clone()
            .unwrap_or_else(|| vec![self.item_size; self.n_items])
    }

    pub fn power(&self) -> PowerParams {
        PowerParams {
            p_listen: self.p_listen,
            p_check: self.p_check,
            p_tx: self.p_tx,
            include_tx: self.include_tx,
        }
    }

    pub fn control(&self) -> ControlConfig {
        ControlConfig {
            layout: FrameLayout {
                header_units: self.header_units,
                entry_units: self.entry_units,
            },
            cell_bits: self.cell_bits,
            unit_bits: self.unit_bits,
        }
    }

    pub fn workload(&self) -> WorkloadConfig {
        WorkloadConfig {
            rs_min: self.rs_min,
            rs_max: self.rs_max,
            write_prob: self.write_prob,
            zipf_theta: self.zipf_theta,
            fixed_item: self.fixed_item(),
        }
    }

    /// Item at `fixed_position` in channel 0's broadcast order.
    pub fn fixed_item(&self) -> Option<ItemId> {
        let p = self.fixed_position? as usize;
        let assignment = assign_channels(self.n_items, self.n_channels);
        assignment
            .iter()
            .enumerate()
            .filter(|(_, ch)| **ch == 0)
            .nth(p.checked_sub(1)?)
            .map(|(i, _)| i as ItemId)
    }

    /// True when the run has no time to do anything.
    pub fn zero_horizon(&self) -> bool {
        self.horizon_cycles == Some(0) || self.horizon_ticks == Some(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let cfg = SimConfig {
            update_rate: 1.5,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "update_rate");
        let cfg = SimConfig {
            rs_max: 101,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "rs_max");
        let cfg = SimConfig {
            protocol: ProtocolId::Fresh,
            write_prob: 0.2,
            ..Default::default()
        };
        assert_eq!(cfg.validate().unwrap_err().field, "write_prob");
    }

    #[test]
    fn fixed_position_maps_to_channel_zero_order() {
        let cfg = SimConfig {
            n_channels: 2,
            fixed_position: Some(3),
            ..Default::default()
        };
        assert_eq!(cfg.fixed_item(), Some(4));
        let cfg = SimConfig {
            fixed_position: Some(100),
            ..Default::default()
        };
        assert_eq!(cfg.fixed_item(), Some(99));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<SimConfig>(r#"{"foo": 1}"#).unwrap_err();
        assert!(err.to_string().contains("foo"));
        let cfg: SimConfig = serde_json::from_str(r#"{"protocol": "nxn", "n_items": 8}"#).unwrap();
        assert_eq!((cfg.protocol, cfg.n_items, cfg.item_size), (ProtocolId::NxN, 8, 16));
    }
}
