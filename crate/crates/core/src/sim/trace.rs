use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::client::CommitMode;
use crate::server::{LockEvent, ReadValue, ValidationResult};
use crate::{ChannelId, ClientId, Cycle, ItemId, Tick, TxnId};

/// One line of the JSONL trace log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: Tick,
    pub actor: String,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceEvent {
    Cycle {
        cycle: Cycle,
        channel: ChannelId,
        schedule: Vec<ItemId>,
        priority_len: usize,
        control: u64,
        length: u64,
    },
    /// Fresh only: an item goes on the air.
    Tx {
        channel: ChannelId,
        item: ItemId,
        version: u64,
        retransmission: bool,
    },
    Update {
        item: ItemId,
        stamp: Cycle,
        value: Option<u64>,
        deferred: bool,
    },
    Lock(LockEvent),
    Arrival {
        client: ClientId,
        txn: TxnId,
        read_set: BTreeSet<ItemId>,
        write_set: BTreeSet<ItemId>,
    },
    Tune {
        client: ClientId,
        txn: TxnId,
        channel: ChannelId,
        purpose: String,
        item: Option<ItemId>,
    },
    Read {
        client: ClientId,
        txn: TxnId,
        channel: ChannelId,
        item: ItemId,
        value: u64,
        stamp: Cycle,
        cycle: Cycle,
    },
    ValidateSent {
        client: ClientId,
        txn: TxnId,
        reads: Vec<ReadValue>,
        writes: Vec<(ItemId, u64)>,
    },
    Result {
        client: ClientId,
        txn: TxnId,
        #[serde(flatten)]
        result: ValidationResult,
    },
    Reread {
        client: ClientId,
        txn: TxnId,
        items: BTreeSet<ItemId>,
    },
    Restart {
        client: ClientId,
        txn: TxnId,
    },
    CommitLocal {
        client: ClientId,
        txn: TxnId,
        reads: Vec<(ItemId, u64)>,
    },
    Commit {
        client: ClientId,
        txn: TxnId,
        mode: CommitMode,
        reads: Vec<(ItemId, u64)>,
        writes: Vec<ItemId>,
    },
}

pub fn to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}
