//! Content provider: database, lock manager, backchannel validation and the
//! dissemination controller's channel assignment.

mod channels;
mod db;
mod locks;
mod validation;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use channels::{assign_channels, channel_groups};
pub use db::{apply_local_update, CpDatabase, VersionRecord};
pub use locks::{ItemLock, LockError, LockGrant, LockMode, LockTable};
pub use validation::{
    reject_all, validate_and_commit, ReadValue, StaleValue, ValidationOutcome, ValidationRequest,
    ValidationResult,
};

use crate::{Cycle, ItemId, Tick, TxnId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServerError {
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("version history of item {item} would go back to cycle {cycle}")]
    HistoryRegression { item: ItemId, cycle: Cycle },
    #[error("txn {txn}: client wrote version {expected} of item {item}, CP installed {installed}")]
    WriteMismatch {
        txn: TxnId,
        item: ItemId,
        expected: u64,
        installed: u64,
    },
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error(transparent)]
    Lock(#[from] LockError),
}

/// Lock transactions issued for local CP updates carry this bit.
pub const LOCAL_TXN_BIT: TxnId = 1 << 63;

pub fn is_local_txn(txn: TxnId) -> bool {
    txn & LOCAL_TXN_BIT != 0
}

/// Lock-manager operations in the order they happened, for replay checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum LockEvent {
    Request {
        txn: TxnId,
        shared: BTreeSet<ItemId>,
        exclusive: BTreeSet<ItemId>,
    },
    Grant {
        txn: TxnId,
    },
    Release {
        txn: TxnId,
    },
    Cancel {
        txn: TxnId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CpEffect {
    LocalApplied {
        txn: TxnId,
        item: ItemId,
        record: VersionRecord,
    },
    LocalDeferred {
        txn: TxnId,
        item: ItemId,
    },
    /// A validation holds its locks and can be processed.
    ValidationLocked { txn: TxnId },
    /// A validation is waiting for locks.
    ValidationQueued { txn: TxnId },
}

/// The content-provider actor.
#[derive(Debug, Clone)]
pub struct ContentProvider {
    pub db: CpDatabase,
    pub locks: LockTable,
    prioritize_stale: bool,
    priority: Vec<ItemId>,
    local_waiting: BTreeMap<TxnId, ItemId>,
    validations: BTreeMap<TxnId, ValidationRequest>,
    next_local: TxnId,
    lock_log: Vec<LockEvent>,
}

impl ContentProvider {
    /// `prioritize_stale` makes rejected items jump to the head of the next
    /// cycle (MCD).
    pub fn new(db: CpDatabase, prioritize_stale: bool) -> Self {
        ContentProvider {
            db,
            locks: LockTable::new(),
            prioritize_stale,
            priority: Vec::new(),
            local_waiting: BTreeMap::new(),
            validations: BTreeMap::new(),
            next_local: 0,
            lock_log: Vec::new(),
        }
    }

    pub fn drain_lock_log(&mut self) -> Vec<LockEvent> {
        std::mem::take(&mut self.lock_log)
    }

    /// Stale items waiting for priority rebroadcast, in rejection order.
    pub fn priority_queue(&self) -> &[ItemId] {
        &self.priority
    }

    pub fn take_priority(&mut self) -> Vec<ItemId> {
        std::mem::take(&mut self.priority)
    }

    pub fn pending_validation(&self, txn: TxnId) -> Option<&ValidationRequest> {
        self.validations.get(&txn)
    }

    fn acquire(
        &mut self,
        txn: TxnId,
        shared: BTreeSet<ItemId>,
        exclusive: BTreeSet<ItemId>,
    ) -> Result<LockGrant, ServerError> {
        let grant = self.locks.acquire(txn, &shared, &exclusive)?;
        self.lock_log.push(LockEvent::Request {
            txn,
            shared,
            exclusive,
        });
        if grant == LockGrant::Granted {
            self.lock_log.push(LockEvent::Grant { txn });
        }
        Ok(grant)
    }

    fn release(&mut self, txn: TxnId, stamp: Cycle, tick: Tick) -> Result<Vec<CpEffect>, ServerError> {
        let granted = self.locks.release(txn)?;
        self.lock_log.push(LockEvent::Release { txn });
        self.handle_grants(granted, stamp, tick)
    }

    fn handle_grants(
        &mut self,
        granted: Vec<TxnId>,
        stamp: Cycle,
        tick: Tick,
    ) -> Result<Vec<CpEffect>, ServerError> {
        let mut effects = Vec::new();
        let mut work = granted;
        while !work.is_empty() {
            let mut next = Vec::new();
            for txn in work {
                self.lock_log.push(LockEvent::Grant { txn });
                if let Some(item) = self.local_waiting.remove(&txn) {
                    let record = apply_local_update(&mut self.db, item, stamp, tick)?;
                    effects.push(CpEffect::LocalApplied { txn, item, record });
                    next.extend(self.locks.release(txn)?);
                    self.lock_log.push(LockEvent::Release { txn });
                } else if self.validations.contains_key(&txn) {
                    effects.push(CpEffect::ValidationLocked { txn });
                } else {
                    return Err(ServerError::UnknownTxn(txn));
                }
            }
            work = next;
        }
        Ok(effects)
    }

    /// Local update transaction on `item`; waits behind client locks.
    pub fn local_update(
        &mut self,
        item: ItemId,
        stamp: Cycle,
        tick: Tick,
    ) -> Result<Vec<CpEffect>, ServerError> {
        self.db.item(item)?;
        let txn = LOCAL_TXN_BIT | self.next_local;
        self.next_local += 1;
        match self.acquire(txn, BTreeSet::new(), BTreeSet::from([item]))? {
            LockGrant::Granted => {
                let record = apply_local_update(&mut self.db, item, stamp, tick)?;
                let mut effects = vec![CpEffect::LocalApplied { txn, item, record }];
                effects.extend(self.release(txn, stamp, tick)?);
                Ok(effects)
            }
            LockGrant::Queued => {
                self.local_waiting.insert(txn, item);
                Ok(vec![CpEffect::LocalDeferred { txn, item }])
            }
        }
    }

    /// A VALIDATE message arrived: S on the read set, X on the write set.
    pub fn receive_validation(
        &mut self,
        request: ValidationRequest,
    ) -> Result<CpEffect, ServerError> {
        let txn = request.txn;
        let exclusive = request.write_items();
        let shared: BTreeSet<ItemId> = request.read_items().difference(&exclusive).copied().collect();
        self.validations.insert(txn, request);
        match self.acquire(txn, shared, exclusive)? {
            LockGrant::Granted => Ok(CpEffect::ValidationLocked { txn }),
            LockGrant::Queued => Ok(CpEffect::ValidationQueued { txn }),
        }
    }

    /// Completes a validation whose locks are held, then releases them.
    pub fn finish_validation(
        &mut self,
        txn: TxnId,
        stamp: Cycle,
        tick: Tick,
    ) -> Result<(ValidationOutcome, Vec<CpEffect>), ServerError> {
        let request = self
            .validations
            .remove(&txn)
            .ok_or(ServerError::UnknownTxn(txn))?;
        let outcome = validate_and_commit(&mut self.db, &request, stamp, tick)?;
        self.note_rejection(&outcome);
        let effects = self.release(txn, stamp, tick)?;
        Ok((outcome, effects))
    }

    /// Lock-wait timeout. Returns `None` when the validation already got its
    /// locks.
    pub fn timeout_validation(
        &mut self,
        txn: TxnId,
        stamp: Cycle,
        tick: Tick,
    ) -> Result<Option<(ValidationOutcome, Vec<CpEffect>)>, ServerError> {
        if !self.locks.is_waiting(txn) {
            return Ok(None);
        }
        let granted = self.locks.cancel(txn)?;
        self.lock_log.push(LockEvent::Cancel { txn });
        let request = self
            .validations
            .remove(&txn)
            .ok_or(ServerError::UnknownTxn(txn))?;
        let outcome = reject_all(&self.db, &request, tick)?;
        self.note_rejection(&outcome);
        let effects = self.handle_grants(granted, stamp, tick)?;
        Ok(Some((outcome, effects)))
    }

    fn note_rejection(&mut self, outcome: &ValidationOutcome) {
        if !self.prioritize_stale {
            return;
        }
        for item in outcome.stale_items() {
            if !self.priority.contains(&item) {
                self.priority.push(item);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(txn: TxnId, reads: &[(ItemId, u64)], writes: &[(ItemId, u64)]) -> ValidationRequest {
        ValidationRequest {
            txn,
            client: 0,
            reads: reads
                .iter()
                .map(|(item, value)| ReadValue {
                    item: *item,
                    value: *value,
                    stamp: 0,
                })
                .collect(),
            writes: writes.to_vec(),
        }
    }

    #[test]
    fn local_update_deferred_behind_client_x_lock() {
        let mut cp = ContentProvider::new(CpDatabase::with_sizes(&[4, 4]), true);
        assert_eq!(
            cp.receive_validation(req(1, &[(0, 0)], &[(0, 1)])).unwrap(),
            CpEffect::ValidationLocked { txn: 1 }
        );
        let effects = cp.local_update(0, 2, 10).unwrap();
        assert!(matches!(effects[0], CpEffect::LocalDeferred { item: 0, .. }));
        assert_eq!(cp.db.value(0).unwrap(), 0);

        let (outcome, effects) = cp.finish_validation(1, 3, 12).unwrap();
        assert_eq!(outcome.result, ValidationResult::Committed);
        // the deferred update lands at the release tick, after the WT write
        match &effects[..] {
            [CpEffect::LocalApplied { record, .. }] => {
                assert_eq!((record.tick, record.cycle, record.value), (12, 3, 2));
            }
            other => panic!("unexpected effects {other:?}"),
        }
        cp.locks.check_invariants().unwrap();
    }

    #[test]
    fn rejection_feeds_priority_queue_once() {
        let mut cp = ContentProvider::new(CpDatabase::with_sizes(&[4, 4]), true);
        cp.local_update(1, 2, 5).unwrap();
        cp.receive_validation(req(1, &[(0, 0), (1, 0)], &[])).unwrap();
        let (outcome, _) = cp.finish_validation(1, 2, 6).unwrap();
        assert_eq!(outcome.stale_items(), BTreeSet::from([1]));
        cp.receive_validation(req(2, &[(1, 0)], &[])).unwrap();
        cp.finish_validation(2, 2, 7).unwrap();
        assert_eq!(cp.take_priority(), vec![1]);
        assert!(cp.priority_queue().is_empty());
    }

    #[test]
    fn no_priority_without_flag() {
        let mut cp = ContentProvider::new(CpDatabase::with_sizes(&[4]), false);
        cp.local_update(0, 2, 5).unwrap();
        cp.receive_validation(req(1, &[(0, 0)], &[])).unwrap();
        cp.finish_validation(1, 2, 6).unwrap();
        assert!(cp.priority_queue().is_empty());
    }

    #[test]
    fn timeout_rejects_whole_read_set() {
        let mut cp = ContentProvider::new(CpDatabase::with_sizes(&[4, 4]), true);
        cp.receive_validation(req(1, &[(0, 0)], &[(0, 1)])).unwrap();
        assert_eq!(
            cp.receive_validation(req(2, &[(0, 0), (1, 0)], &[])).unwrap(),
            CpEffect::ValidationQueued { txn: 2 }
        );
        let (outcome, _) = cp.timeout_validation(2, 2, 50).unwrap().unwrap();
        assert_eq!(outcome.stale_items(), BTreeSet::from([0, 1]));
        assert!(cp.timeout_validation(1, 2, 51).unwrap().is_none());
    }
}
