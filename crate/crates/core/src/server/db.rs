use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::model::DataItem;
use crate::{ChannelId, Cycle, ItemId, Tick, TxnId};

/// One installed version of an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    /// First cycle whose snapshot carries this version.
    pub cycle: Cycle,
    /// Tick at which the version was installed.
    pub tick: Tick,
    pub value: u64,
    /// Client transaction that wrote it; `None` for local CP updates.
    pub writer: Option<TxnId>,
    /// Position in the database-wide install order.
    pub seq: u64,
}

/// Content-provider database: current items plus an append-only version
/// history per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpDatabase {
    pub items: BTreeMap<ItemId, DataItem>,
    pub version_history: BTreeMap<ItemId, Vec<VersionRecord>>,
    pub current_cycle: BTreeMap<ChannelId, Cycle>,
    /// Number of versions installed so far, across all items.
    pub installs: u64,
}

impl CpDatabase {
    /// Loads `sizes.len()` predetermined items at version 0.
    pub fn with_sizes(sizes: &[u32]) -> Self {
        let items = sizes
            .iter()
            .enumerate()
            .map(|(i, s)| (i as ItemId, DataItem::new(i as ItemId, *s)))
            .collect();
        let version_history = (0..sizes.len() as ItemId).map(|i| (i, Vec::new())).collect();
        CpDatabase {
            items,
            version_history,
            current_cycle: BTreeMap::new(),
            installs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: ItemId) -> Result<&DataItem, ServerError> {
        self.items.get(&id).ok_or(ServerError::UnknownItem(id))
    }

    pub fn value(&self, id: ItemId) -> Result<u64, ServerError> {
        self.item(id).map(|i| i.value)
    }

    /// Installs the next version of `item_id`, effective from `cycle`.
    pub fn install(
        &mut self,
        item_id: ItemId,
        cycle: Cycle,
        tick: Tick,
        writer: Option<TxnId>,
    ) -> Result<VersionRecord, ServerError> {
        let item = self
            .items
            .get_mut(&item_id)
            .ok_or(ServerError::UnknownItem(item_id))?;
        let history = self.version_history.entry(item_id).or_default();
        if let Some(last) = history.last() {
            if cycle < last.cycle || tick < last.tick {
                return Err(ServerError::HistoryRegression {
                    item: item_id,
                    cycle,
                });
            }
        }
        item.value += 1;
        item.last_updated_cycle = cycle;
        let record = VersionRecord {
            cycle,
            tick,
            value: item.value,
            writer,
            seq: self.installs,
        };
        self.installs += 1;
        history.push(record);
        Ok(record)
    }

    /// Version of `item` in the snapshot broadcast at the start of `cycle`.
    pub fn value_at_snapshot(&self, item: ItemId, cycle: Cycle) -> u64 {
        self.version_history
            .get(&item)
            .map_or(0, |h| h.iter().filter(|v| v.cycle <= cycle).count() as u64)
    }

    /// Version of `item` after every install at or before `tick`.
    pub fn value_at_tick(&self, item: ItemId, tick: Tick) -> u64 {
        self.version_history
            .get(&item)
            .map_or(0, |h| h.iter().filter(|v| v.tick <= tick).count() as u64)
    }

    /// Version of `item` once the first `seq` installs have happened.
    pub fn value_before_seq(&self, item: ItemId, seq: u64) -> u64 {
        self.version_history
            .get(&item)
            .map_or(0, |h| h.iter().filter(|v| v.seq < seq).count() as u64)
    }
}

/// A local update transaction at the CP: bumps the version and stamps the
/// item with `cycle`, the cycle that will carry the new value.
pub fn apply_local_update(
    db: &mut CpDatabase,
    item_id: ItemId,
    cycle: Cycle,
    tick: Tick,
) -> Result<VersionRecord, ServerError> {
    db.install(item_id, cycle, tick, None)
}
