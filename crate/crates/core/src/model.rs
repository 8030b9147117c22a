//! Items, cycle frames, the air index and the MCD consistency test.
//!
//! All sizes are in abstract transmission units ("words"). One word is sent
//! per tick per channel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ChannelId, Cycle, ItemId, Tick, TxnId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("item {0} scheduled twice in one cycle")]
    DuplicateItem(ItemId),
    #[error("item {item} was already disseminated in cycle {previous}, cannot build cycle {cycle}")]
    CycleNotAdvancing {
        item: ItemId,
        previous: Cycle,
        cycle: Cycle,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("transaction {txn}: illegal transition {from} -> {to}")]
    IllegalTransition { txn: TxnId, from: MtState, to: MtState },
    #[error("transaction {txn}: item {item} is not in the read set")]
    NotInReadSet { txn: TxnId, item: ItemId },
    #[error("transaction {txn}: write set is not a subset of the read set")]
    WriteSetNotInReadSet { txn: TxnId },
}

/// A content-provider item. `value` is a version counter: it equals the
/// number of updates applied since the start of the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataItem {
    pub id: ItemId,
    pub size: u32,
    pub value: u64,
    /// Cycle whose snapshot first carries the current value.
    pub last_updated_cycle: Cycle,
    pub last_disseminated_cycle: Cycle,
}

impl DataItem {
    pub fn new(id: ItemId, size: u32) -> Self {
        DataItem {
            id,
            size,
            value: 0,
            last_updated_cycle: 0,
            last_disseminated_cycle: 0,
        }
    }

    /// True iff the item changed after its previous broadcast.
    pub fn updated_since_dissemination(&self) -> bool {
        self.last_updated_cycle > self.last_disseminated_cycle
    }
}

/// Per-item control information carried in the air index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub item_id: ItemId,
    /// Units from the start of the payload region.
    pub offset: u32,
    pub size: u32,
    pub last_updated_cycle: Cycle,
    pub updated_flag: bool,
}

/// Header and index-entry sizes in units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub header_units: u32,
    pub entry_units: u32,
}

impl Default for FrameLayout {
    fn default() -> Self {
        FrameLayout {
            header_units: 2,
            entry_units: 2,
        }
    }
}

/// One dissemination transaction: channel, cycle, index and item payloads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleFrame {
    pub channel: ChannelId,
    pub cycle: Cycle,
    pub index: Vec<IndexEntry>,
    /// Version carried by each payload, parallel to `index`.
    pub values: Vec<u64>,
    pub payload_length: u64,
    pub header_length: u32,
    pub entry_size: u32,
}

impl CycleFrame {
    pub fn index_length(&self) -> u64 {
        self.index.len() as u64 * u64::from(self.entry_size)
    }

    /// Header plus index, in units.
    pub fn control_length(&self) -> u64 {
        u64::from(self.header_length) + self.index_length()
    }

    /// Total transmission length in units.
    pub fn length(&self) -> u64 {
        self.control_length() + self.payload_length
    }

    pub fn item_ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.index.iter().map(|e| e.item_id)
    }

    /// Item id -> last updated cycle, as advertised by this frame.
    pub fn index_view(&self) -> BTreeMap<ItemId, Cycle> {
        self.index
            .iter()
            .map(|e| (e.item_id, e.last_updated_cycle))
            .collect()
    }

    pub fn value_of(&self, item_id: ItemId) -> Option<u64> {
        self.index
            .iter()
            .position(|e| e.item_id == item_id)
            .map(|pos| self.values[pos])
    }
}

/// Builds the frame for `cycle` from the scheduled items, in transmission
/// order, and stamps each item as disseminated in `cycle`.
pub fn build_cycle_frame(
    schedule: &mut [DataItem],
    channel: ChannelId,
    cycle: Cycle,
    layout: FrameLayout,
) -> Result<CycleFrame, FrameError> {
    let mut seen = BTreeSet::new();
    for item in schedule.iter() {
        if !seen.insert(item.id) {
            return Err(FrameError::DuplicateItem(item.id));
        }
        if item.last_disseminated_cycle >= cycle {
            return Err(FrameError::CycleNotAdvancing {
                item: item.id,
                previous: item.last_disseminated_cycle,
                cycle,
            });
        }
    }

    let mut index = Vec::with_capacity(schedule.len());
    let mut values = Vec::with_capacity(schedule.len());
    let mut offset: u64 = 0;
    for item in schedule.iter_mut() {
        index.push(IndexEntry {
            item_id: item.id,
            offset: offset as u32,
            size: item.size,
            last_updated_cycle: item.last_updated_cycle,
            updated_flag: item.updated_since_dissemination(),
        });
        values.push(item.value);
        offset += u64::from(item.size);
        item.last_disseminated_cycle = cycle;
    }

    Ok(CycleFrame {
        channel,
        cycle,
        index,
        values,
        payload_length: offset,
        header_length: layout.header_units,
        entry_size: layout.entry_units,
    })
}

/// Index entry for `item_id`, or `None` when the item is not on the air
/// this cycle.
pub fn locate_item(frame: &CycleFrame, item_id: ItemId) -> Option<&IndexEntry> {
    frame.index.iter().find(|e| e.item_id == item_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MtState {
    Pending,
    Listening,
    Validating,
    Rereading,
    Committed,
    Aborted,
}

impl fmt::Display for MtState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl MtState {
    pub fn can_transition_to(self, to: MtState) -> bool {
        use MtState::*;
        matches!(
            (self, to),
            (Pending, Listening)
                | (Listening, Committed)
                | (Listening, Validating)
                | (Listening, Aborted)
                | (Validating, Committed)
                | (Validating, Rereading)
                | (Validating, Aborted)
                | (Rereading, Listening)
                | (Rereading, Aborted)
                | (Aborted, Listening)
        )
    }
}

/// A value read off the air together with its update-cycle stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub value: u64,
    pub stamp: Cycle,
    /// Cycle in which the value was received.
    pub cycle: Cycle,
    pub tick: Tick,
}

/// A mobile transaction. The write set is always a subset of the read set;
/// a written item's new version is its observed version plus one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MobileTransaction {
    pub txn_id: TxnId,
    pub read_set: BTreeSet<ItemId>,
    pub write_set: BTreeSet<ItemId>,
    pub observed: BTreeMap<ItemId, Observation>,
    pub state: MtState,
    pub created_tick: Tick,
    pub committed_tick: Option<Tick>,
    pub restarts: u32,
    pub rejections: u32,
}

impl MobileTransaction {
    pub fn new(
        txn_id: TxnId,
        read_set: BTreeSet<ItemId>,
        write_set: BTreeSet<ItemId>,
        created_tick: Tick,
    ) -> Result<Self, TxnError> {
        if !write_set.is_subset(&read_set) {
            return Err(TxnError::WriteSetNotInReadSet { txn: txn_id });
        }
        Ok(MobileTransaction {
            txn_id,
            read_set,
            write_set,
            observed: BTreeMap::new(),
            state: MtState::Pending,
            created_tick,
            committed_tick: None,
            restarts: 0,
            rejections: 0,
        })
    }

    pub fn is_read_only(&self) -> bool {
        self.write_set.is_empty()
    }

    pub fn transition(&mut self, to: MtState) -> Result<(), TxnError> {
        if !self.state.can_transition_to(to) {
            return Err(TxnError::IllegalTransition {
                txn: self.txn_id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    pub fn observe(&mut self, item: ItemId, obs: Observation) -> Result<(), TxnError> {
        if !self.read_set.contains(&item) {
            return Err(TxnError::NotInReadSet {
                txn: self.txn_id,
                item,
            });
        }
        self.observed.insert(item, obs);
        Ok(())
    }

    /// Read-set items without an observation yet.
    pub fn unread(&self) -> BTreeSet<ItemId> {
        self.read_set
            .iter()
            .copied()
            .filter(|id| !self.observed.contains_key(id))
            .collect()
    }

    pub fn all_read(&self) -> bool {
        self.observed.len() == self.read_set.len()
    }

    /// New versions to install: observed version + 1 for every written item.
    pub fn pending_writes(&self) -> BTreeMap<ItemId, u64> {
        self.write_set
            .iter()
            .filter_map(|id| self.observed.get(id).map(|o| (*id, o.value + 1)))
            .collect()
    }

    /// Drops every observation and counts a restart.
    pub fn clear_for_restart(&mut self) {
        self.observed.clear();
        self.restarts += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent: bool,
    pub stale_items: BTreeSet<ItemId>,
    /// Observed items with no entry in the examined index.
    pub unknown_items: BTreeSet<ItemId>,
}

/// Compares each observed update-cycle stamp against the stamp advertised by
/// the index. An item missing from the index is reported as unknown, not
/// stale.
pub fn check_consistency(
    mt: &MobileTransaction,
    index_view: &BTreeMap<ItemId, Cycle>,
) -> ConsistencyReport {
    let mut stale_items = BTreeSet::new();
    let mut unknown_items = BTreeSet::new();
    for (item, obs) in &mt.observed {
        match index_view.get(item) {
            Some(stamp) if *stamp != obs.stamp => {
                stale_items.insert(*item);
            }
            Some(_) => {}
            None => {
                unknown_items.insert(*item);
            }
        }
    }
    ConsistencyReport {
        consistent: stale_items.is_empty() && unknown_items.is_empty(),
        stale_items,
        unknown_items,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(sizes: &[u32]) -> Vec<DataItem> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, s)| DataItem::new(i as ItemId, *s))
            .collect()
    }

    fn mt_with(observed: &[(ItemId, Cycle)]) -> MobileTransaction {
        let rs = observed.iter().map(|(i, _)| *i).collect();
        let mut mt = MobileTransaction::new(1, rs, BTreeSet::new(), 0).unwrap();
        for (item, stamp) in observed {
            mt.observe(
                *item,
                Observation {
                    value: 0,
                    stamp: *stamp,
                    cycle: 1,
                    tick: 0,
                },
            )
            .unwrap();
        }
        mt
    }

    #[test]
    fn empty_schedule_is_header_only() {
        let frame = build_cycle_frame(&mut [], 0, 1, FrameLayout::default()).unwrap();
        assert!(frame.index.is_empty());
        assert_eq!(frame.payload_length, 0);
        assert_eq!(frame.length(), 2);
    }

    #[test]
    fn three_equal_items_lay_out_by_prefix_sums() {
        let mut sched = items(&[10, 10, 10]);
        let frame = build_cycle_frame(&mut sched, 0, 1, FrameLayout::default()).unwrap();
        let offsets: Vec<u32> = frame.index.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, vec![0, 10, 20]);
        assert_eq!(frame.length(), 38);
        assert!(sched.iter().all(|i| i.last_disseminated_cycle == 1));
    }

    #[test]
    fn updated_flag_tracks_update_after_previous_broadcast() {
        let mut item = DataItem::new(7, 4);
        item.last_disseminated_cycle = 4;
        item.last_updated_cycle = 5;
        item.value = 1;
        let mut sched = vec![item];
        let frame = build_cycle_frame(&mut sched, 0, 6, FrameLayout::default()).unwrap();
        assert_eq!(frame.index[0].last_updated_cycle, 5);
        assert!(frame.index[0].updated_flag);
        assert_eq!(frame.values[0], 1);
    }

    #[test]
    fn duplicate_schedule_entry_is_rejected() {
        let mut sched = vec![DataItem::new(3, 1), DataItem::new(3, 1)];
        assert_eq!(
            build_cycle_frame(&mut sched, 0, 1, FrameLayout::default()),
            Err(FrameError::DuplicateItem(3))
        );
    }

    #[test]
    fn cycle_must_advance() {
        let mut item = DataItem::new(0, 1);
        item.last_disseminated_cycle = 3;
        let err = build_cycle_frame(&mut [item], 0, 3, FrameLayout::default()).unwrap_err();
        assert!(matches!(err, FrameError::CycleNotAdvancing { .. }));
    }

    #[test]
    fn locate_second_item() {
        let mut sched = items(&[10, 10, 10]);
        let frame = build_cycle_frame(&mut sched, 0, 1, FrameLayout::default()).unwrap();
        let e = locate_item(&frame, 1).unwrap();
        assert_eq!((e.offset, e.size), (10, 10));
        assert!(locate_item(&frame, 42).is_none());
        let empty = build_cycle_frame(&mut [], 0, 1, FrameLayout::default()).unwrap();
        assert!(locate_item(&empty, 0).is_none());
    }

    #[test]
    fn consistency_all_equal() {
        let mt = mt_with(&[(1, 3), (2, 0)]);
        let view = BTreeMap::from([(1, 3), (2, 0)]);
        let r = check_consistency(&mt, &view);
        assert!(r.consistent);
        assert!(r.stale_items.is_empty() && r.unknown_items.is_empty());
    }

    #[test]
    fn consistency_stale_item() {
        let mt = mt_with(&[(1, 3)]);
        let r = check_consistency(&mt, &BTreeMap::from([(1, 5)]));
        assert!(!r.consistent);
        assert_eq!(r.stale_items, BTreeSet::from([1]));
    }

    #[test]
    fn consistency_membership_cases_match_set_comprehension() {
        // x current, y absent from the index, z stale
        let mt = mt_with(&[(10, 2), (11, 2), (12, 2)]);
        let view = BTreeMap::from([(10, 2), (12, 4), (99, 1)]);
        let r = check_consistency(&mt, &view);

        let expected_stale: BTreeSet<ItemId> = mt
            .observed
            .iter()
            .filter(|(k, o)| view.get(k).is_some_and(|s| *s != o.stamp))
            .map(|(k, _)| *k)
            .collect();
        let expected_unknown: BTreeSet<ItemId> = mt
            .observed
            .keys()
            .filter(|k| !view.contains_key(k))
            .copied()
            .collect();
        assert_eq!(r.stale_items, expected_stale);
        assert_eq!(r.unknown_items, expected_unknown);
        assert_eq!(r.unknown_items, BTreeSet::from([11]));
        assert!(!r.consistent);
    }

    #[test]
    fn state_machine_rejects_skips() {
        let mut mt = mt_with(&[]);
        assert!(mt.transition(MtState::Committed).is_err());
        mt.transition(MtState::Listening).unwrap();
        mt.transition(MtState::Validating).unwrap();
        mt.transition(MtState::Rereading).unwrap();
        mt.transition(MtState::Listening).unwrap();
        mt.transition(MtState::Committed).unwrap();
        assert!(mt.transition(MtState::Listening).is_err());
    }

    #[test]
    fn write_set_must_be_read() {
        let err = MobileTransaction::new(9, BTreeSet::from([1]), BTreeSet::from([2]), 0);
        assert!(err.is_err());
    }

    #[test]
    fn observe_outside_read_set_fails() {
        let mut mt = mt_with(&[(1, 0)]);
        let obs = Observation {
            value: 0,
            stamp: 0,
            cycle: 1,
            tick: 0,
        };
        assert!(mt.observe(2, obs).is_err());
    }
}
