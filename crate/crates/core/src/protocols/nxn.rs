use std::collections::BTreeSet;

use super::{ClientAction, ClientEvent, ProtocolError, ProtocolId};
use crate::model::{MobileTransaction, MtState, Observation};
use crate::server::CpDatabase;
use crate::{ChannelId, Cycle, ItemId};

/// Units needed for an n×n matrix of `cell_bits`-bit cells.
pub fn nxn_matrix_units(n: usize, cell_bits: u32, unit_bits: u32) -> u64 {
    let bits = (n as u64) * (n as u64) * u64::from(cell_bits);
    bits.div_ceil(u64::from(unit_bits.max(1)))
}

/// Conflict matrix broadcast at the head of a cycle.
///
/// Cell (i, j) is set when item i changed after the snapshot that item j was
/// last broadcast from, i.e. `last_updated_cycle(i) > last_disseminated(j)`
/// for an item that has been updated at least once. The diagonal is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NxnMatrix {
    pub n: usize,
    pub cycle: Cycle,
    bits: Vec<u64>,
    /// Last dissemination cycle of each column item before `cycle`.
    pub reference: Vec<Cycle>,
    pub size_units: u64,
}

impl NxnMatrix {
    pub fn get(&self, row: usize, col: usize) -> bool {
        let k = row * self.n + col;
        self.bits[k / 64] >> (k % 64) & 1 == 1
    }

    fn set(&mut self, row: usize, col: usize) {
        let k = row * self.n + col;
        self.bits[k / 64] |= 1 << (k % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// True when some column whose item was broadcast at or after `since`
    /// flags `row` as changed afterwards.
    pub fn changed_since(&self, row: usize, since: Cycle) -> bool {
        (0..self.n).any(|col| col != row && self.reference[col] >= since && self.get(row, col))
    }
}

/// Builds the matrix for `cycle`. Must run before the cycle's frames stamp
/// their items as disseminated.
pub fn nxn_build_matrix(db: &CpDatabase, cycle: Cycle, cell_bits: u32, unit_bits: u32) -> NxnMatrix {
    let n = db.len();
    let reference: Vec<Cycle> = db.items.values().map(|i| i.last_disseminated_cycle).collect();
    let mut m = NxnMatrix {
        n,
        cycle,
        bits: vec![0; (n * n).div_ceil(64)],
        reference,
        size_units: nxn_matrix_units(n, cell_bits, unit_bits),
    };
    for (row, item) in db.items.values().enumerate() {
        if item.value == 0 {
            continue;
        }
        for col in 0..n {
            if col != row && item.last_updated_cycle > m.reference[col] {
                m.set(row, col);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NxnDecision {
    Commit,
    AbortRestart,
}

/// Commit unless the matrix marks an item read in an earlier cycle as changed
/// since that read.
pub fn nxn_client_decide(matrix: &NxnMatrix, mt: &MobileTransaction) -> NxnDecision {
    let stale = mt.observed.iter().any(|(item, obs)| {
        obs.cycle < matrix.cycle && matrix.changed_since(*item as usize, obs.cycle)
    });
    if stale {
        NxnDecision::AbortRestart
    } else {
        NxnDecision::Commit
    }
}

/// nxn client: downloads the matrix each cycle, restarts the whole
/// transaction on any detected conflict, and otherwise reads the remaining
/// items at positions known from the broadcast program.
#[derive(Debug, Clone)]
pub struct NxnClient {
    tuned: BTreeSet<ChannelId>,
    awaiting_matrix: bool,
    awaiting_items: BTreeSet<ItemId>,
    decided: bool,
}

impl NxnClient {
    pub fn new(tuned: BTreeSet<ChannelId>) -> Self {
        NxnClient {
            tuned,
            awaiting_matrix: false,
            awaiting_items: BTreeSet::new(),
            decided: false,
        }
    }

    pub fn tuned(&self) -> &BTreeSet<ChannelId> {
        &self.tuned
    }

    pub fn reset_plan(&mut self) {
        self.awaiting_matrix = false;
        self.awaiting_items.clear();
    }

    /// The matrix is read from the lowest tuned channel.
    pub fn matrix_channel(&self) -> Option<ChannelId> {
        self.tuned.iter().next().copied()
    }

    pub fn step(
        &mut self,
        mt: &mut MobileTransaction,
        event: ClientEvent<'_>,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        match event {
            ClientEvent::CycleStart { .. } => {
                self.reset_plan();
                self.decided = false;
                if mt.state != MtState::Listening {
                    return Ok(Vec::new());
                }
                self.awaiting_matrix = true;
                Ok(self
                    .matrix_channel()
                    .map(|channel| ClientAction::ListenMatrix { channel })
                    .into_iter()
                    .collect())
            }
            ClientEvent::MatrixDecoded { matrix, program } => {
                if !self.awaiting_matrix {
                    return Ok(Vec::new());
                }
                self.awaiting_matrix = false;
                let mut actions = Vec::new();
                if nxn_client_decide(matrix, mt) == NxnDecision::AbortRestart {
                    actions.push(ClientAction::AbortRestart);
                    // the restart clears the observations; plan the full read set
                    mt.observed.clear();
                }
                for item in mt.unread() {
                    for view in program.iter().filter(|v| self.tuned.contains(&v.channel)) {
                        if let Some((start, _)) = view.item_span(item) {
                            self.awaiting_items.insert(item);
                            actions.push(ClientAction::Doze { until: start });
                            actions.push(ClientAction::ListenItem {
                                channel: view.channel,
                                item,
                            });
                        }
                    }
                }
                actions.extend(self.maybe_decide(mt));
                Ok(actions)
            }
            ClientEvent::ItemReceived {
                channel,
                item,
                value,
                stamp,
                cycle,
                header_tick,
            } => {
                if !self.tuned.contains(&channel) {
                    return Err(ProtocolError::UntunedChannel(channel));
                }
                if !self.awaiting_items.remove(&item) {
                    return Err(ProtocolError::UnrequestedItem(item));
                }
                mt.observe(
                    item,
                    Observation {
                        value,
                        stamp,
                        cycle,
                        tick: header_tick,
                    },
                )?;
                Ok(self.maybe_decide(mt))
            }
            other => Err(ProtocolError::UnexpectedEvent {
                protocol: ProtocolId::NxN,
                event: other.name(),
            }),
        }
    }

    fn maybe_decide(&mut self, mt: &MobileTransaction) -> Vec<ClientAction> {
        if self.decided
            || self.awaiting_matrix
            || !self.awaiting_items.is_empty()
            || !mt.all_read()
            || mt.state != MtState::Listening
        {
            return Vec::new();
        }
        self.decided = true;
        if mt.is_read_only() {
            vec![ClientAction::CommitLocal]
        } else {
            vec![ClientAction::SendValidation]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_cycle_frame, FrameLayout};
    use crate::server::apply_local_update;

    fn disseminate_all(db: &mut CpDatabase, cycle: Cycle) {
        let mut items: Vec<_> = db.items.values().cloned().collect();
        build_cycle_frame(&mut items, 0, cycle, FrameLayout::default()).unwrap();
        for it in items {
            db.items.insert(it.id, it);
        }
    }

    #[test]
    fn no_updates_gives_zero_matrix() {
        let mut db = CpDatabase::with_sizes(&[1; 8]);
        disseminate_all(&mut db, 1);
        let m = nxn_build_matrix(&db, 2, 1, 32);
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn matrix_size_for_hundred_items() {
        assert_eq!(nxn_matrix_units(100, 1, 32), 313);
        assert_eq!(nxn_matrix_units(8, 1, 32), 2);
        assert_eq!(nxn_matrix_units(0, 1, 32), 0);
    }

    #[test]
    fn single_update_fills_its_row_except_diagonal() {
        let mut db = CpDatabase::with_sizes(&[1; 8]);
        disseminate_all(&mut db, 1);
        // updated while cycle 1 was on the air
        apply_local_update(&mut db, 2, 2, 5).unwrap();
        let m = nxn_build_matrix(&db, 2, 1, 32);
        // brute force over all cells
        for i in 0..8 {
            for j in 0..8 {
                let expected = i == 2 && j != 2;
                assert_eq!(m.get(i, j), expected, "cell ({i},{j})");
            }
        }
    }

    fn observed_mt(reads: &[(ItemId, Cycle)]) -> MobileTransaction {
        let mut mt = MobileTransaction::new(
            1,
            reads.iter().map(|(i, _)| *i).collect(),
            BTreeSet::new(),
            0,
        )
        .unwrap();
        for (item, cycle) in reads {
            mt.observe(
                *item,
                Observation {
                    value: 0,
                    stamp: 0,
                    cycle: *cycle,
                    tick: 0,
                },
            )
            .unwrap();
        }
        mt
    }

    #[test]
    fn zero_matrix_commits() {
        let mut db = CpDatabase::with_sizes(&[1; 4]);
        disseminate_all(&mut db, 1);
        let m = nxn_build_matrix(&db, 2, 1, 32);
        assert_eq!(nxn_client_decide(&m, &observed_mt(&[(0, 1), (3, 1)])), NxnDecision::Commit);
    }

    #[test]
    fn marked_read_item_restarts() {
        let mut db = CpDatabase::with_sizes(&[1; 4]);
        disseminate_all(&mut db, 1);
        apply_local_update(&mut db, 3, 2, 5).unwrap();
        let m = nxn_build_matrix(&db, 2, 1, 32);
        assert_eq!(
            nxn_client_decide(&m, &observed_mt(&[(0, 1), (3, 1)])),
            NxnDecision::AbortRestart
        );
        // an item read in the current cycle is never judged by this matrix
        assert_eq!(nxn_client_decide(&m, &observed_mt(&[(3, 2)])), NxnDecision::Commit);
    }
}
