//! Concurrency-control strategies for the dissemination network.
//!
//! * `mcd`: per-cycle air index with update-cycle stamps; read-only
//!   transactions commit locally, others validate at the CP; stale items are
//!   re-read individually and rebroadcast first in the next cycle.
//! * `fresh`: no index; the broadcaster interrupts the cycle to push every
//!   update, clients listen continuously and restart on a newer version.
//! * `nxn`: an n×n conflict bit matrix at the head of every cycle; any
//!   detected conflict restarts the whole transaction.
//! * `perfect`: a zero-overhead oracle that wakes exactly for the payloads
//!   it needs.

mod fresh;
mod mcd;
mod nxn;
mod perfect;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fresh::{fresh_server_step, FreshBroadcaster, FreshClient, Transmission, FRESH_ITEM_HEADER_UNITS};
pub use mcd::{McdClient, McdScheduler, ScheduledChannel};
pub use nxn::{nxn_build_matrix, nxn_client_decide, nxn_matrix_units, NxnClient, NxnDecision, NxnMatrix};
pub use perfect::{perfect_oracle_plan, PerfectClient};

use crate::model::{CycleFrame, FrameLayout, MobileTransaction, TxnError};
use crate::{ChannelId, Cycle, ItemId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolId {
    Mcd,
    Fresh,
    #[serde(rename = "nxn")]
    NxN,
    Perfect,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [
        ProtocolId::Mcd,
        ProtocolId::Fresh,
        ProtocolId::NxN,
        ProtocolId::Perfect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::Mcd => "mcd",
            ProtocolId::Fresh => "fresh",
            ProtocolId::NxN => "nxn",
            ProtocolId::Perfect => "perfect",
        }
    }

    /// Whether a rejected transaction re-reads only its stale items.
    pub fn rereads_partially(self) -> bool {
        matches!(self, ProtocolId::Mcd | ProtocolId::Perfect)
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown protocol {0:?} (expected mcd, fresh, nxn or perfect)")]
pub struct UnknownProtocol(pub String);

impl FromStr for ProtocolId {
    type Err = UnknownProtocol;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcd" => Ok(ProtocolId::Mcd),
            "fresh" => Ok(ProtocolId::Fresh),
            "nxn" => Ok(ProtocolId::NxN),
            "perfect" => Ok(ProtocolId::Perfect),
            other => Err(UnknownProtocol(other.to_string())),
        }
    }
}

/// Sizes that determine per-cycle control overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub layout: FrameLayout,
    pub cell_bits: u32,
    pub unit_bits: u32,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            layout: FrameLayout::default(),
            cell_bits: 1,
            unit_bits: 32,
        }
    }
}

/// Control units one channel carries per cycle. Fresh interruption
/// retransmissions are payload overhead and are accounted by the engine.
pub fn control_overhead(
    protocol: ProtocolId,
    n_items_in_cycle: usize,
    n_database: usize,
    config: &ControlConfig,
) -> u64 {
    let header = u64::from(config.layout.header_units);
    match protocol {
        ProtocolId::Mcd => header + n_items_in_cycle as u64 * u64::from(config.layout.entry_units),
        ProtocolId::NxN => {
            header + nxn_matrix_units(n_database, config.cell_bits, config.unit_bits)
        }
        ProtocolId::Perfect | ProtocolId::Fresh => 0,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("event for channel {0}, which the client is not tuned to")]
    UntunedChannel(ChannelId),
    #[error("item {0} delivered but not requested")]
    UnrequestedItem(ItemId),
    #[error("write transactions are not supported by the fresh protocol")]
    WriteUnderFresh,
    #[error("event {event} is not handled by the {protocol} client")]
    UnexpectedEvent {
        protocol: ProtocolId,
        event: &'static str,
    },
    #[error(transparent)]
    Txn(#[from] TxnError),
}

/// What the client does next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientAction {
    Doze { until: Tick },
    ListenIndex { channel: ChannelId },
    ListenMatrix { channel: ChannelId },
    ListenItem { channel: ChannelId, item: ItemId },
    ListenContinuous { channel: ChannelId },
    Check { count: u32 },
    CommitLocal,
    SendValidation,
    RereadPending(BTreeSet<ItemId>),
    AbortRestart,
}

/// A frame as seen on the air: payload offsets are relative to
/// `payload_start`.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub channel: ChannelId,
    pub frame: &'a CycleFrame,
    pub payload_start: Tick,
}

impl FrameView<'_> {
    /// Absolute first and one-past-last tick of an item, if on the air.
    pub fn item_span(&self, item: ItemId) -> Option<(Tick, Tick)> {
        crate::model::locate_item(self.frame, item).map(|e| {
            let start = self.payload_start + u64::from(e.offset);
            (start, start + u64::from(e.size))
        })
    }
}

/// Something the client hears, or a message it receives.
#[derive(Debug, Clone, Copy)]
pub enum ClientEvent<'a> {
    CycleStart {
        cycle: Cycle,
    },
    IndexDecoded {
        view: FrameView<'a>,
    },
    MatrixDecoded {
        matrix: &'a NxnMatrix,
        program: &'a [FrameView<'a>],
    },
    /// Oracle knowledge of the cycle on the air (Perfect only).
    Schedule {
        program: &'a [FrameView<'a>],
        now: Tick,
    },
    ItemHeader {
        channel: ChannelId,
        item: ItemId,
        version: u64,
        tick: Tick,
    },
    /// Fresh: an in-order cyclic item starts on `channel`, so every update
    /// committed up to `tick` has already been pushed there.
    DrainedBoundary {
        channel: ChannelId,
        tick: Tick,
    },
    ItemReceived {
        channel: ChannelId,
        item: ItemId,
        value: u64,
        stamp: Cycle,
        cycle: Cycle,
        header_tick: Tick,
    },
}

impl ClientEvent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            ClientEvent::CycleStart { .. } => "CycleStart",
            ClientEvent::IndexDecoded { .. } => "IndexDecoded",
            ClientEvent::MatrixDecoded { .. } => "MatrixDecoded",
            ClientEvent::Schedule { .. } => "Schedule",
            ClientEvent::ItemHeader { .. } => "ItemHeader",
            ClientEvent::DrainedBoundary { .. } => "DrainedBoundary",
            ClientEvent::ItemReceived { .. } => "ItemReceived",
        }
    }
}

/// Per-transaction client-side protocol state.
#[derive(Debug, Clone)]
pub enum ClientLogic {
    Mcd(McdClient),
    Fresh(FreshClient),
    NxN(NxnClient),
    Perfect(PerfectClient),
}

impl ClientLogic {
    pub fn new(
        protocol: ProtocolId,
        mt: &MobileTransaction,
        channel_of: &[ChannelId],
        single_tuner: bool,
    ) -> Result<Self, ProtocolError> {
        let tuned: BTreeSet<ChannelId> = mt
            .read_set
            .iter()
            .map(|i| channel_of[*i as usize])
            .collect();
        Ok(match protocol {
            ProtocolId::Mcd => ClientLogic::Mcd(McdClient::new(tuned, single_tuner)),
            ProtocolId::Fresh => {
                if !mt.is_read_only() {
                    return Err(ProtocolError::WriteUnderFresh);
                }
                ClientLogic::Fresh(FreshClient::new(tuned))
            }
            ProtocolId::NxN => ClientLogic::NxN(NxnClient::new(tuned)),
            ProtocolId::Perfect => ClientLogic::Perfect(PerfectClient::new(tuned)),
        })
    }

    pub fn protocol(&self) -> ProtocolId {
        match self {
            ClientLogic::Mcd(_) => ProtocolId::Mcd,
            ClientLogic::Fresh(_) => ProtocolId::Fresh,
            ClientLogic::NxN(_) => ProtocolId::NxN,
            ClientLogic::Perfect(_) => ProtocolId::Perfect,
        }
    }

    pub fn tuned_channels(&self) -> &BTreeSet<ChannelId> {
        match self {
            ClientLogic::Mcd(c) => c.tuned(),
            ClientLogic::Fresh(c) => c.tuned(),
            ClientLogic::NxN(c) => c.tuned(),
            ClientLogic::Perfect(c) => c.tuned(),
        }
    }

    pub fn step(
        &mut self,
        mt: &mut MobileTransaction,
        event: ClientEvent<'_>,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        match self {
            ClientLogic::Mcd(c) => c.step(mt, event),
            ClientLogic::Fresh(c) => c.step(mt, event),
            ClientLogic::NxN(c) => c.step(mt, event),
            ClientLogic::Perfect(c) => c.step(mt, event),
        }
    }

    /// Called when a transaction starts or is rejected mid-cycle. Fresh starts
    /// listening continuously, Perfect plans against the cycle on the air;
    /// the index-based protocols wait for the next cycle start.
    pub fn activate(
        &mut self,
        mt: &mut MobileTransaction,
        program: &[FrameView<'_>],
        now: Tick,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        match self {
            ClientLogic::Fresh(c) => Ok(c.activate()),
            ClientLogic::Perfect(c) if !program.is_empty() => {
                c.step(mt, ClientEvent::Schedule { program, now })
            }
            _ => Ok(Vec::new()),
        }
    }

    /// Forget in-flight plans after a restart or a rejection.
    pub fn reset_plan(&mut self) {
        match self {
            ClientLogic::Mcd(c) => c.reset_plan(),
            ClientLogic::Fresh(c) => c.reset_plan(),
            ClientLogic::NxN(c) => c.reset_plan(),
            ClientLogic::Perfect(c) => c.reset_plan(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_names_round_trip() {
        for p in ProtocolId::ALL {
            assert_eq!(p.name().parse::<ProtocolId>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        assert!("NXN".parse::<ProtocolId>().is_err());
    }

    #[test]
    fn perfect_has_no_overhead() {
        let cfg = ControlConfig::default();
        for (a, b) in [(0, 0), (50, 100), (1000, 1000)] {
            assert_eq!(control_overhead(ProtocolId::Perfect, a, b, &cfg), 0);
            assert_eq!(control_overhead(ProtocolId::Fresh, a, b, &cfg), 0);
        }
    }

    #[test]
    fn mcd_overhead_is_header_plus_entries() {
        let cfg = ControlConfig::default();
        assert_eq!(control_overhead(ProtocolId::Mcd, 50, 100, &cfg), 102);
    }

    #[test]
    fn nxn_overhead_is_header_plus_matrix() {
        let cfg = ControlConfig::default();
        // ceil(100 * 100 / 32) = 313
        assert_eq!(control_overhead(ProtocolId::NxN, 50, 100, &cfg), 313 + 2);
        assert_eq!(
            control_overhead(ProtocolId::NxN, 1, 100, &cfg),
            control_overhead(ProtocolId::NxN, 100, 100, &cfg)
        );
    }
}
