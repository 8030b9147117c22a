//! Shared/exclusive lock manager with all-or-nothing acquisition.
//!
//! A request either gets every lock it asks for or waits in a FIFO queue
//! holding nothing, so no wait-for cycle can form. A request is granted only
//! when it is compatible with the current holders and no earlier waiter
//! conflicts with it on a common item; waiters on an item are therefore
//! granted in arrival order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ItemId, TxnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl LockMode {
    fn conflicts(self, other: LockMode) -> bool {
        self == LockMode::Exclusive || other == LockMode::Exclusive
    }
}

/// Current lock state of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItemLock {
    Free,
    Shared(BTreeSet<TxnId>),
    Exclusive(TxnId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockGrant {
    Granted,
    Queued,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LockError {
    #[error("transaction {0} already holds or awaits locks")]
    AlreadyActive(TxnId),
    #[error("transaction {0} holds no locks")]
    UnknownTxn(TxnId),
    #[error("transaction {0} is not waiting")]
    NotWaiting(TxnId),
    #[error("lock safety violated on item {item}: {detail}")]
    Unsafe { item: ItemId, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LockRequest {
    txn: TxnId,
    locks: BTreeMap<ItemId, LockMode>,
}

impl LockRequest {
    fn conflicts_with(&self, other: &LockRequest) -> bool {
        self.locks.iter().any(|(item, mode)| {
            other
                .locks
                .get(item)
                .is_some_and(|other_mode| mode.conflicts(*other_mode))
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LockTable {
    items: BTreeMap<ItemId, ItemLock>,
    held: BTreeMap<TxnId, BTreeMap<ItemId, LockMode>>,
    queue: VecDeque<LockRequest>,
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, item: ItemId) -> ItemLock {
        self.items.get(&item).cloned().unwrap_or(ItemLock::Free)
    }

    pub fn holds(&self, txn: TxnId) -> bool {
        self.held.contains_key(&txn)
    }

    pub fn is_waiting(&self, txn: TxnId) -> bool {
        self.queue.iter().any(|r| r.txn == txn)
    }

    pub fn waiting(&self) -> Vec<TxnId> {
        self.queue.iter().map(|r| r.txn).collect()
    }

    /// Requests X on `exclusive` and S on `shared \ exclusive`.
    pub fn acquire(
        &mut self,
        txn: TxnId,
        shared: &BTreeSet<ItemId>,
        exclusive: &BTreeSet<ItemId>,
    ) -> Result<LockGrant, LockError> {
        if self.holds(txn) || self.is_waiting(txn) {
            return Err(LockError::AlreadyActive(txn));
        }
        let mut locks: BTreeMap<ItemId, LockMode> =
            shared.iter().map(|i| (*i, LockMode::Shared)).collect();
        for item in exclusive {
            locks.insert(*item, LockMode::Exclusive);
        }
        let request = LockRequest { txn, locks };
        let blocked_by_queue = self.queue.iter().any(|w| w.conflicts_with(&request));
        if !blocked_by_queue && self.compatible(&request) {
            self.grant(request);
            Ok(LockGrant::Granted)
        } else {
            self.queue.push_back(request);
            Ok(LockGrant::Queued)
        }
    }

    /// Frees every lock of `txn` and returns the transactions granted as a
    /// result, in grant order.
    pub fn release(&mut self, txn: TxnId) -> Result<Vec<TxnId>, LockError> {
        let locks = self.held.remove(&txn).ok_or(LockError::UnknownTxn(txn))?;
        for item in locks.keys() {
            let next = match self.items.remove(item) {
                Some(ItemLock::Shared(mut holders)) => {
                    holders.remove(&txn);
                    if holders.is_empty() {
                        None
                    } else {
                        Some(ItemLock::Shared(holders))
                    }
                }
                _ => None,
            };
            if let Some(state) = next {
                self.items.insert(*item, state);
            }
        }
        Ok(self.promote())
    }

    /// Withdraws a waiting request; may unblock later waiters.
    pub fn cancel(&mut self, txn: TxnId) -> Result<Vec<TxnId>, LockError> {
        let pos = self
            .queue
            .iter()
            .position(|r| r.txn == txn)
            .ok_or(LockError::NotWaiting(txn))?;
        self.queue.remove(pos);
        Ok(self.promote())
    }

    fn compatible(&self, request: &LockRequest) -> bool {
        request.locks.iter().all(|(item, mode)| {
            match (self.items.get(item), mode) {
                (None, _) | (Some(ItemLock::Free), _) => true,
                (Some(ItemLock::Shared(_)), LockMode::Shared) => true,
                _ => false,
            }
        })
    }

    fn grant(&mut self, request: LockRequest) {
        for (item, mode) in &request.locks {
            let state = self.items.entry(*item).or_insert(ItemLock::Free);
            *state = match (std::mem::replace(state, ItemLock::Free), mode) {
                (ItemLock::Free, LockMode::Exclusive) => ItemLock::Exclusive(request.txn),
                (ItemLock::Free, LockMode::Shared) => {
                    ItemLock::Shared(BTreeSet::from([request.txn]))
                }
                (ItemLock::Shared(mut h), LockMode::Shared) => {
                    h.insert(request.txn);
                    ItemLock::Shared(h)
                }
                (other, _) => unreachable!("grant of incompatible lock over {other:?}"),
            };
        }
        self.held.insert(request.txn, request.locks);
    }

    fn promote(&mut self) -> Vec<TxnId> {
        let mut granted = Vec::new();
        let mut still_waiting: VecDeque<LockRequest> = VecDeque::new();
        while let Some(request) = self.queue.pop_front() {
            let blocked = still_waiting.iter().any(|w| w.conflicts_with(&request));
            if !blocked && self.compatible(&request) {
                granted.push(request.txn);
                self.grant(request);
            } else {
                still_waiting.push_back(request);
            }
        }
        self.queue = still_waiting;
        granted
    }

    /// No item has two X holders, nor an X holder alongside S holders, and
    /// the per-item state agrees with the per-transaction view.
    pub fn check_invariants(&self) -> Result<(), LockError> {
        let mut x_count: BTreeMap<ItemId, usize> = BTreeMap::new();
        let mut s_count: BTreeMap<ItemId, usize> = BTreeMap::new();
        for locks in self.held.values() {
            for (item, mode) in locks {
                match mode {
                    LockMode::Exclusive => *x_count.entry(*item).or_default() += 1,
                    LockMode::Shared => *s_count.entry(*item).or_default() += 1,
                }
            }
        }
        for (item, x) in &x_count {
            let s = s_count.get(item).copied().unwrap_or(0);
            if *x > 1 || s > 0 {
                return Err(LockError::Unsafe {
                    item: *item,
                    detail: format!("{x} exclusive holders, {s} shared holders"),
                });
            }
        }
        for (item, state) in &self.items {
            let consistent = match state {
                ItemLock::Free => true,
                ItemLock::Exclusive(t) => {
                    x_count.get(item) == Some(&1)
                        && self.held.get(t).and_then(|l| l.get(item)) == Some(&LockMode::Exclusive)
                }
                ItemLock::Shared(h) => {
                    !h.is_empty()
                        && s_count.get(item) == Some(&h.len())
                        && !x_count.contains_key(item)
                }
            };
            if !consistent {
                return Err(LockError::Unsafe {
                    item: *item,
                    detail: format!("item state {state:?} disagrees with holders"),
                });
            }
        }
        for (txn, locks) in &self.held {
            if locks.is_empty() {
                continue;
            }
            for item in locks.keys() {
                if !self.items.contains_key(item) {
                    return Err(LockError::Unsafe {
                        item: *item,
                        detail: format!("txn {txn} holds a lock on a free item"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[ItemId]) -> BTreeSet<ItemId> {
        items.iter().copied().collect()
    }

    #[test]
    fn empty_table_grants() {
        let mut t = LockTable::new();
        assert_eq!(t.acquire(1, &set(&[1, 2]), &set(&[2])).unwrap(), LockGrant::Granted);
        assert_eq!(t.state(2), ItemLock::Exclusive(1));
        assert_eq!(t.state(1), ItemLock::Shared(set_txn(&[1])));
        t.check_invariants().unwrap();
    }

    fn set_txn(t: &[TxnId]) -> BTreeSet<TxnId> {
        t.iter().copied().collect()
    }

    #[test]
    fn shared_after_exclusive_queues() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[]), &set(&[7])).unwrap();
        assert_eq!(t.acquire(2, &set(&[7]), &set(&[])).unwrap(), LockGrant::Queued);
        assert!(t.is_waiting(2));
    }

    #[test]
    fn shared_is_compatible() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[7]), &set(&[])).unwrap();
        assert_eq!(t.acquire(2, &set(&[7]), &set(&[])).unwrap(), LockGrant::Granted);
        t.check_invariants().unwrap();
    }

    #[test]
    fn release_sole_x_grants_queued_shared() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[]), &set(&[7])).unwrap();
        t.acquire(2, &set(&[7]), &set(&[])).unwrap();
        t.acquire(3, &set(&[7]), &set(&[])).unwrap();
        assert_eq!(t.release(1).unwrap(), vec![2, 3]);
        assert_eq!(t.state(7), ItemLock::Shared(set_txn(&[2, 3])));
    }

    #[test]
    fn x_waiter_blocked_until_all_shared_released() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[7]), &set(&[])).unwrap();
        t.acquire(2, &set(&[7]), &set(&[])).unwrap();
        t.acquire(3, &set(&[]), &set(&[7])).unwrap();
        assert!(t.release(1).unwrap().is_empty());
        assert_eq!(t.release(2).unwrap(), vec![3]);
    }

    #[test]
    fn no_barging_past_waiters() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[7]), &set(&[])).unwrap();
        t.acquire(2, &set(&[]), &set(&[7])).unwrap();
        // Compatible with the holder, but must not overtake the X waiter.
        assert_eq!(t.acquire(3, &set(&[7]), &set(&[])).unwrap(), LockGrant::Queued);
        assert_eq!(t.release(1).unwrap(), vec![2]);
        assert_eq!(t.release(2).unwrap(), vec![3]);
    }

    #[test]
    fn unrelated_items_do_not_block() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[]), &set(&[7])).unwrap();
        t.acquire(2, &set(&[]), &set(&[7])).unwrap();
        assert_eq!(t.acquire(3, &set(&[]), &set(&[8])).unwrap(), LockGrant::Granted);
    }

    #[test]
    fn double_acquire_and_unknown_release_fail() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[1]), &set(&[])).unwrap();
        assert_eq!(t.acquire(1, &set(&[2]), &set(&[])), Err(LockError::AlreadyActive(1)));
        assert_eq!(t.release(9), Err(LockError::UnknownTxn(9)));
    }

    #[test]
    fn cancel_unblocks_later_waiter() {
        let mut t = LockTable::new();
        t.acquire(1, &set(&[7]), &set(&[])).unwrap();
        t.acquire(2, &set(&[]), &set(&[7])).unwrap();
        t.acquire(3, &set(&[7]), &set(&[])).unwrap();
        assert_eq!(t.cancel(2).unwrap(), vec![3]);
        assert_eq!(t.cancel(2), Err(LockError::NotWaiting(2)));
    }
}
