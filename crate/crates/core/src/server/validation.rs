use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::db::CpDatabase;
use super::ServerError;
use crate::{ClientId, Cycle, ItemId, Tick, TxnId};

/// A value the client read, as sent over the backchannel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadValue {
    pub item: ItemId,
    pub value: u64,
    pub stamp: Cycle,
}

/// `VALIDATE{txn, [(item, value, stamp)], [(item, new_value)]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRequest {
    pub txn: TxnId,
    pub client: ClientId,
    pub reads: Vec<ReadValue>,
    pub writes: Vec<(ItemId, u64)>,
}

impl ValidationRequest {
    pub fn read_items(&self) -> BTreeSet<ItemId> {
        self.reads.iter().map(|r| r.item).collect()
    }

    pub fn write_items(&self) -> BTreeSet<ItemId> {
        self.writes.iter().map(|(i, _)| *i).collect()
    }
}

/// Current version of an item the client read stale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StaleValue {
    pub item: ItemId,
    pub value: u64,
    pub cycle: Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "stale")]
pub enum ValidationResult {
    Committed,
    Rejected(Vec<StaleValue>),
}

/// `RESULT{txn, Committed | Rejected[(item, value, cycle)]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub txn: TxnId,
    pub result: ValidationResult,
    pub confirmation_tick: Tick,
}

impl ValidationOutcome {
    pub fn stale_items(&self) -> BTreeSet<ItemId> {
        match &self.result {
            ValidationResult::Committed => BTreeSet::new(),
            ValidationResult::Rejected(s) => s.iter().map(|v| v.item).collect(),
        }
    }
}

/// Validates a request whose locks are held: commits when every read value is
/// still current, installing the write set with stamp `cycle`, and otherwise
/// rejects with the current versions of the stale items.
pub fn validate_and_commit(
    db: &mut CpDatabase,
    request: &ValidationRequest,
    cycle: Cycle,
    tick: Tick,
) -> Result<ValidationOutcome, ServerError> {
    let mut stale = Vec::new();
    for read in &request.reads {
        let item = db.item(read.item)?;
        if item.value != read.value {
            stale.push(StaleValue {
                item: read.item,
                value: item.value,
                cycle: item.last_updated_cycle,
            });
        }
    }
    let result = if stale.is_empty() {
        for (item, new_value) in &request.writes {
            let record = db.install(*item, cycle, tick, Some(request.txn))?;
            if record.value != *new_value {
                return Err(ServerError::WriteMismatch {
                    txn: request.txn,
                    item: *item,
                    expected: *new_value,
                    installed: record.value,
                });
            }
        }
        ValidationResult::Committed
    } else {
        ValidationResult::Rejected(stale)
    };
    Ok(ValidationOutcome {
        txn: request.txn,
        result,
        confirmation_tick: tick,
    })
}

/// Conservative rejection after a lock-wait timeout: every read item is
/// reported stale with its current version.
pub fn reject_all(
    db: &CpDatabase,
    request: &ValidationRequest,
    tick: Tick,
) -> Result<ValidationOutcome, ServerError> {
    let stale = request
        .reads
        .iter()
        .map(|r| {
            db.item(r.item).map(|i| StaleValue {
                item: r.item,
                value: i.value,
                cycle: i.last_updated_cycle,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ValidationOutcome {
        txn: request.txn,
        result: ValidationResult::Rejected(stale),
        confirmation_tick: tick,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::db::apply_local_update;

    fn request(reads: &[(ItemId, u64)], writes: &[(ItemId, u64)]) -> ValidationRequest {
        ValidationRequest {
            txn: 42,
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
    fn current_reads_commit_and_stamp_writes() {
        let mut db = CpDatabase::with_sizes(&[4, 4]);
        let out = validate_and_commit(&mut db, &request(&[(0, 0), (1, 0)], &[(1, 1)]), 5, 99)
            .unwrap();
        assert_eq!(out.result, ValidationResult::Committed);
        assert_eq!(db.item(1).unwrap().last_updated_cycle, 5);
        assert_eq!(db.value(1).unwrap(), 1);
        assert_eq!(db.version_history[&1][0].writer, Some(42));
    }

    #[test]
    fn stale_read_rejects_with_fresh_value() {
        let mut db = CpDatabase::with_sizes(&[4, 4]);
        apply_local_update(&mut db, 0, 2, 10).unwrap();
        let out = validate_and_commit(&mut db, &request(&[(0, 0), (1, 0)], &[(1, 1)]), 3, 20)
            .unwrap();
        assert_eq!(
            out.result,
            ValidationResult::Rejected(vec![StaleValue {
                item: 0,
                value: 1,
                cycle: 2
            }])
        );
        // nothing applied
        assert_eq!(db.value(1).unwrap(), 0);
    }

    #[test]
    fn read_only_commit_leaves_db_unchanged() {
        let mut db = CpDatabase::with_sizes(&[4, 4]);
        apply_local_update(&mut db, 0, 2, 10).unwrap();
        let before = db.clone();
        let out = validate_and_commit(&mut db, &request(&[(0, 1), (1, 0)], &[]), 4, 30).unwrap();
        assert_eq!(out.result, ValidationResult::Committed);
        assert_eq!(db, before);
    }
}
