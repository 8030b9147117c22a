//! Independent checks over a finished run: every committed transaction must
//! match some consistent database state, and the lock log must replay against
//! a plain FIFO lock model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::client::CommitMode;
use crate::server::{CpDatabase, LockEvent};
use crate::{ClientId, Cycle, ItemId, Tick, TxnId};

/// What the engine knows about one commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub client: ClientId,
    pub txn: TxnId,
    pub mode: CommitMode,
    pub commit_tick: Tick,
    pub commit_cycle: Cycle,
    pub reads: BTreeMap<ItemId, u64>,
    pub writes: BTreeSet<ItemId>,
    /// Installs that preceded the validation, for validated commits.
    pub cp_seq: Option<u64>,
}

/// Which states a local (read-only) commit may be serialized at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotMode {
    /// Only the snapshot a cycle starts from.
    CycleBoundary,
    /// Any prefix of the install order before the commit.
    Instant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleViolation {
    pub txn: TxnId,
    pub detail: String,
}

fn violation(txn: TxnId, detail: impl Into<String>) -> OracleViolation {
    OracleViolation {
        txn,
        detail: detail.into(),
    }
}

fn matches(reads: &BTreeMap<ItemId, u64>, value: impl Fn(ItemId) -> u64) -> bool {
    reads.iter().all(|(i, v)| value(*i) == *v)
}

/// Checks every commit against the final version history.
pub fn serializability_oracle(
    db: &CpDatabase,
    commits: &[CommitRecord],
    mode: SnapshotMode,
) -> Result<(), OracleViolation> {
    for c in commits {
        match (c.mode, c.cp_seq) {
            (CommitMode::Validated, Some(seq)) => check_validated(db, c, seq)?,
            (CommitMode::Validated, None) => {
                return Err(violation(c.txn, "validated commit without install position"))
            }
            (CommitMode::Local, _) => {
                if !c.writes.is_empty() {
                    return Err(violation(c.txn, "local commit with a write set"));
                }
                let ok = match mode {
                    SnapshotMode::CycleBoundary => (0..=c.commit_cycle)
                        .any(|s| matches(&c.reads, |i| db.value_at_snapshot(i, s))),
                    SnapshotMode::Instant => instant_cuts(db, c)
                        .into_iter()
                        .any(|seq| matches(&c.reads, |i| db.value_before_seq(i, seq))),
                };
                if !ok {
                    return Err(violation(
                        c.txn,
                        format!("reads {:?} match no consistent state", c.reads),
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Candidate cut points: before any install, and right after each install
/// of a read item that happened no later than the commit.
fn instant_cuts(db: &CpDatabase, c: &CommitRecord) -> BTreeSet<u64> {
    let mut cuts = BTreeSet::from([0]);
    for item in c.reads.keys() {
        for v in db.version_history.get(item).into_iter().flatten() {
            if v.tick <= c.commit_tick {
                cuts.insert(v.seq + 1);
            }
        }
    }
    cuts
}

fn check_validated(db: &CpDatabase, c: &CommitRecord, seq: u64) -> Result<(), OracleViolation> {
    for (item, read) in &c.reads {
        let current = db.value_before_seq(*item, seq);
        if current != *read {
            return Err(violation(
                c.txn,
                format!("item {item} read {read} but was {current} at validation"),
            ));
        }
    }
    let written: Vec<_> = db
        .version_history
        .iter()
        .flat_map(|(i, h)| h.iter().map(move |v| (*i, *v)))
        .filter(|(_, v)| v.writer == Some(c.txn))
        .collect();
    let items: BTreeSet<ItemId> = written.iter().map(|(i, _)| *i).collect();
    if items != c.writes || written.len() != c.writes.len() {
        return Err(violation(c.txn, "installed writes differ from the write set"));
    }
    let end = seq + c.writes.len() as u64;
    for (item, v) in written {
        if !(seq..end).contains(&v.seq) {
            return Err(violation(c.txn, format!("write of item {item} not atomic")));
        }
        if let Some(read) = c.reads.get(&item) {
            if v.value != read + 1 {
                return Err(violation(c.txn, format!("write of item {item} lost an update")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ModelRequest {
    txn: TxnId,
    shared: BTreeSet<ItemId>,
    exclusive: BTreeSet<ItemId>,
}

impl ModelRequest {
    fn conflicts(&self, other: &ModelRequest) -> bool {
        self.exclusive
            .iter()
            .any(|i| other.shared.contains(i) || other.exclusive.contains(i))
            || other.exclusive.iter().any(|i| self.shared.contains(i))
    }
}

#[derive(Default)]
struct LockModel {
    holders: Vec<ModelRequest>,
    waiting: VecDeque<ModelRequest>,
    expected: VecDeque<TxnId>,
}

impl LockModel {
    fn free_for(&self, r: &ModelRequest) -> bool {
        self.holders.iter().all(|h| !h.conflicts(r))
    }

    fn promote(&mut self) {
        let mut kept: VecDeque<ModelRequest> = VecDeque::new();
        while let Some(r) = self.waiting.pop_front() {
            if kept.iter().all(|k| !k.conflicts(&r)) && self.free_for(&r) {
                self.expected.push_back(r.txn);
                self.holders.push(r);
            } else {
                kept.push_back(r);
            }
        }
        self.waiting = kept;
    }
}

/// Replays the lock log against a FIFO shared/exclusive model.
pub fn lock_replay_oracle(log: &[LockEvent]) -> Result<(), OracleViolation> {
    let mut m = LockModel::default();
    for e in log {
        match e {
            LockEvent::Request {
                txn,
                shared,
                exclusive,
            } => {
                if let Some(t) = m.expected.front() {
                    return Err(violation(*t, "predicted grant never logged"));
                }
                let r = ModelRequest {
                    txn: *txn,
                    shared: shared.difference(exclusive).copied().collect(),
                    exclusive: exclusive.clone(),
                };
                m.waiting.push_back(r);
                m.promote();
            }
            LockEvent::Grant { txn } => {
                if m.expected.pop_front() != Some(*txn) {
                    return Err(violation(*txn, "grant out of FIFO order"));
                }
            }
            LockEvent::Release { txn } => {
                let pos = m
                    .holders
                    .iter()
                    .position(|h| h.txn == *txn)
                    .ok_or_else(|| violation(*txn, "release without holding"))?;
                m.holders.remove(pos);
                m.promote();
            }
            LockEvent::Cancel { txn } => {
                let pos = m
                    .waiting
                    .iter()
                    .position(|w| w.txn == *txn)
                    .ok_or_else(|| violation(*txn, "cancel without waiting"))?;
                m.waiting.remove(pos);
                m.promote();
            }
        }
        for (i, a) in m.holders.iter().enumerate() {
            if let Some(b) = m.holders[i + 1..].iter().find(|b| a.conflicts(b)) {
                return Err(violation(a.txn, format!("holds a lock conflicting with txn {}", b.txn)));
            }
        }
    }
    match m.expected.front() {
        Some(t) => Err(violation(*t, "predicted grant never logged")),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(txn: TxnId, s: &[ItemId], x: &[ItemId]) -> LockEvent {
        LockEvent::Request {
            txn,
            shared: s.iter().copied().collect(),
            exclusive: x.iter().copied().collect(),
        }
    }

    #[test]
    fn fifo_log_replays() {
        let log = [
            req(1, &[0], &[]),
            LockEvent::Grant { txn: 1 },
            req(2, &[], &[0]),
            req(3, &[0], &[]),
            LockEvent::Release { txn: 1 },
            LockEvent::Grant { txn: 2 },
            LockEvent::Release { txn: 2 },
            LockEvent::Grant { txn: 3 },
        ];
        lock_replay_oracle(&log).unwrap();
    }

    #[test]
    fn barging_is_caught() {
        // 3 must not overtake the waiting writer 2
        let log = [
            req(1, &[0], &[]),
            LockEvent::Grant { txn: 1 },
            req(2, &[], &[0]),
            req(3, &[0], &[]),
            LockEvent::Grant { txn: 3 },
        ];
        assert!(lock_replay_oracle(&log).is_err());
    }

    #[test]
    fn missing_grant_is_caught() {
        assert!(lock_replay_oracle(&[req(1, &[0], &[])]).is_err());
    }

    fn local(txn: TxnId, reads: &[(ItemId, u64)], tick: Tick, cycle: Cycle) -> CommitRecord {
        CommitRecord {
            client: 0,
            txn,
            mode: CommitMode::Local,
            commit_tick: tick,
            commit_cycle: cycle,
            reads: reads.iter().copied().collect(),
            writes: BTreeSet::new(),
            cp_seq: None,
        }
    }

    #[test]
    fn snapshot_reads_pass_and_mixed_reads_fail() {
        let mut db = CpDatabase::with_sizes(&[1, 1]);
        db.install(0, 2, 10, None).unwrap();
        db.install(1, 3, 20, None).unwrap();
        let ok = local(1, &[(0, 1), (1, 0)], 25, 2);
        serializability_oracle(&db, &[ok], SnapshotMode::CycleBoundary).unwrap();
        // item 1 at version 1 only exists from cycle 3 on
        let early = local(2, &[(0, 1), (1, 1)], 25, 2);
        assert!(serializability_oracle(&db, &[early.clone()], SnapshotMode::CycleBoundary).is_err());
        serializability_oracle(&db, &[early], SnapshotMode::Instant).unwrap();
        let mixed = local(3, &[(0, 0), (1, 1)], 25, 3);
        assert!(serializability_oracle(&db, &[mixed.clone()], SnapshotMode::CycleBoundary).is_err());
        assert!(serializability_oracle(&db, &[mixed], SnapshotMode::Instant).is_err());
    }

    #[test]
    fn validated_commit_checks_write_position() {
        let mut db = CpDatabase::with_sizes(&[1, 1]);
        db.install(1, 1, 1, None).unwrap();
        db.install(0, 2, 5, Some(7)).unwrap();
        let c = CommitRecord {
            client: 0,
            txn: 7,
            mode: CommitMode::Validated,
            commit_tick: 15,
            commit_cycle: 1,
            reads: [(0, 0), (1, 1)].into_iter().collect(),
            writes: BTreeSet::from([0]),
            cp_seq: Some(1),
        };
        serializability_oracle(&db, &[c.clone()], SnapshotMode::CycleBoundary).unwrap();
        let stale = CommitRecord {
            cp_seq: Some(0),
            ..c
        };
        assert!(serializability_oracle(&db, &[stale], SnapshotMode::CycleBoundary).is_err());
    }
}
