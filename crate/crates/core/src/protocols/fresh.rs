use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{ClientAction, ClientEvent, ProtocolError, ProtocolId};
use crate::model::{MobileTransaction, MtState, Observation};
use crate::{ChannelId, ItemId, Tick};

/// Each fresh transmission is prefixed by one unit carrying item id and
/// version, since there is no index to locate items.
pub const FRESH_ITEM_HEADER_UNITS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transmission {
    Cyclic(ItemId),
    Retransmission(ItemId),
}

impl Transmission {
    pub fn item(self) -> ItemId {
        match self {
            Transmission::Cyclic(i) | Transmission::Retransmission(i) => i,
        }
    }
}

/// Interrupt-on-update broadcaster for one channel.
///
/// At every item boundary, queued updates go out first in commit order, then
/// the cyclic sequence resumes where it stopped.
#[derive(Debug, Clone)]
pub struct FreshBroadcaster {
    group: Vec<ItemId>,
    cursor: usize,
    pending: VecDeque<ItemId>,
}

impl FreshBroadcaster {
    pub fn new(group: Vec<ItemId>) -> Self {
        FreshBroadcaster {
            group,
            cursor: 0,
            pending: VecDeque::new(),
        }
    }

    pub fn start_pass(&mut self) {
        self.cursor = 0;
    }

    pub fn pass_complete(&self) -> bool {
        self.cursor >= self.group.len()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// An update to `item` committed; it preempts the cyclic sequence at the
    /// next boundary. An item already waiting is not queued twice.
    pub fn on_update(&mut self, item: ItemId) {
        if !self.pending.contains(&item) {
            self.pending.push_back(item);
        }
    }

    /// What to transmit at the current item boundary; `None` when the pass is
    /// over and nothing is pending.
    pub fn next_transmission(&mut self) -> Option<Transmission> {
        if let Some(item) = self.pending.pop_front() {
            return Some(Transmission::Retransmission(item));
        }
        let item = *self.group.get(self.cursor)?;
        self.cursor += 1;
        Some(Transmission::Cyclic(item))
    }
}

/// One broadcaster step: register an optional update commit, then pick the
/// transmission for the boundary.
pub fn fresh_server_step(
    broadcaster: &mut FreshBroadcaster,
    update: Option<ItemId>,
) -> Option<Transmission> {
    if let Some(item) = update {
        broadcaster.on_update(item);
    }
    broadcaster.next_transmission()
}

/// Fresh client: listens continuously, checks every item header against its
/// read set, restarts when an item it already read shows a newer version.
///
/// It commits only after every tuned channel has passed an in-order cyclic
/// boundary (or gone idle) at or after the header of its last read, so
/// every update that preceded that read has been heard.
#[derive(Debug, Clone)]
pub struct FreshClient {
    tuned: BTreeSet<ChannelId>,
    drained_at: BTreeMap<ChannelId, Tick>,
    idle: BTreeSet<ChannelId>,
    awaiting: BTreeSet<ItemId>,
    started: bool,
    committed: bool,
}

impl FreshClient {
    pub fn new(tuned: BTreeSet<ChannelId>) -> Self {
        FreshClient {
            tuned,
            drained_at: BTreeMap::new(),
            idle: BTreeSet::new(),
            awaiting: BTreeSet::new(),
            started: false,
            committed: false,
        }
    }

    pub fn tuned(&self) -> &BTreeSet<ChannelId> {
        &self.tuned
    }

    pub fn reset_plan(&mut self) {
        self.awaiting.clear();
    }

    /// Starts continuous listening on every tuned channel.
    pub fn activate(&mut self) -> Vec<ClientAction> {
        if self.started {
            return Vec::new();
        }
        self.started = true;
        self.tuned
            .iter()
            .map(|ch| ClientAction::ListenContinuous { channel: *ch })
            .collect()
    }

    fn check_tuned(&self, channel: ChannelId) -> Result<(), ProtocolError> {
        if self.tuned.contains(&channel) {
            Ok(())
        } else {
            Err(ProtocolError::UntunedChannel(channel))
        }
    }

    pub fn step(
        &mut self,
        mt: &mut MobileTransaction,
        event: ClientEvent<'_>,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        if !mt.is_read_only() {
            return Err(ProtocolError::WriteUnderFresh);
        }
        if mt.state != MtState::Listening || self.committed {
            return Ok(Vec::new());
        }
        match event {
            ClientEvent::CycleStart { .. } => Ok(self.activate()),
            ClientEvent::ItemHeader {
                channel,
                item,
                version,
                ..
            } => {
                self.check_tuned(channel)?;
                self.idle.remove(&channel);
                let mut actions = vec![ClientAction::Check { count: 1 }];
                if mt.read_set.contains(&item) {
                    match mt.observed.get(&item) {
                        Some(obs) if version > obs.value => {
                            self.awaiting.clear();
                            self.awaiting.insert(item);
                            actions.push(ClientAction::AbortRestart);
                            actions.push(ClientAction::ListenItem { channel, item });
                        }
                        Some(_) => {}
                        None => {
                            if self.awaiting.insert(item) {
                                actions.push(ClientAction::ListenItem { channel, item });
                            }
                        }
                    }
                }
                Ok(actions)
            }
            ClientEvent::DrainedBoundary { channel, tick } => {
                self.check_tuned(channel)?;
                let slot = self.drained_at.entry(channel).or_insert(tick);
                *slot = (*slot).max(tick);
                Ok(self.maybe_commit(mt))
            }
            ClientEvent::ItemReceived {
                channel,
                item,
                value,
                stamp,
                cycle,
                header_tick,
            } => {
                self.check_tuned(channel)?;
                // receptions cut off by a restart are dropped
                if self.awaiting.remove(&item) {
                    mt.observe(
                        item,
                        Observation {
                            value,
                            stamp,
                            cycle,
                            tick: header_tick,
                        },
                    )?;
                }
                Ok(self.maybe_commit(mt))
            }
            other => Err(ProtocolError::UnexpectedEvent {
                protocol: ProtocolId::Fresh,
                event: other.name(),
            }),
        }
    }

    /// Marks a channel that finished its pass with nothing queued.
    pub fn channel_idle(&mut self, channel: ChannelId) {
        if self.tuned.contains(&channel) {
            self.idle.insert(channel);
        }
    }

    fn maybe_commit(&mut self, mt: &MobileTransaction) -> Vec<ClientAction> {
        if self.committed || !mt.all_read() || !self.awaiting.is_empty() {
            return Vec::new();
        }
        let last_read = mt.observed.values().map(|o| o.tick).max().unwrap_or(0);
        let drained = self.tuned.iter().all(|ch| {
            self.idle.contains(ch) || self.drained_at.get(ch).is_some_and(|t| *t >= last_read)
        });
        if drained {
            self.committed = true;
            vec![ClientAction::CommitLocal]
        } else {
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Replays a broadcaster over `steps` boundaries, injecting updates
    /// before the given boundary numbers.
    fn replay(group: Vec<ItemId>, updates: &[(usize, ItemId)], steps: usize) -> Vec<Transmission> {
        let mut b = FreshBroadcaster::new(group);
        let mut out = Vec::new();
        for step in 0..steps {
            for (_, item) in updates.iter().filter(|(at, _)| *at == step) {
                b.on_update(*item);
            }
            match b.next_transmission() {
                Some(t) => out.push(t),
                None => break,
            }
        }
        out
    }

    #[test]
    fn no_updates_is_pure_cycle() {
        let out = replay(vec![0, 1, 2, 3], &[], 10);
        assert_eq!(
            out,
            vec![
                Transmission::Cyclic(0),
                Transmission::Cyclic(1),
                Transmission::Cyclic(2),
                Transmission::Cyclic(3)
            ]
        );
    }

    #[test]
    fn update_during_item_k_lands_between_k_and_k_plus_one() {
        // item 1 is on the air when item 3 is updated
        let out = replay(vec![0, 1, 2, 3], &[(2, 3)], 10);
        let items: Vec<_> = out.iter().map(|t| t.item()).collect();
        assert_eq!(items, vec![0, 1, 3, 2, 3]);
        let pos_k = items.iter().position(|i| *i == 1).unwrap();
        assert_eq!(out[pos_k + 1], Transmission::Retransmission(3));
        assert_eq!(out[pos_k + 2], Transmission::Cyclic(2));
        let retx = out
            .iter()
            .filter(|t| matches!(t, Transmission::Retransmission(_)))
            .count();
        assert_eq!(retx, 1);
    }

    #[test]
    fn queued_updates_go_out_in_commit_order() {
        let mut b = FreshBroadcaster::new(vec![0, 1, 2, 3]);
        assert_eq!(fresh_server_step(&mut b, None), Some(Transmission::Cyclic(0)));
        b.on_update(3);
        b.on_update(2);
        assert_eq!(b.next_transmission(), Some(Transmission::Retransmission(3)));
        assert_eq!(b.next_transmission(), Some(Transmission::Retransmission(2)));
        assert_eq!(b.next_transmission(), Some(Transmission::Cyclic(1)));
    }

    fn mt(rs: &[ItemId]) -> MobileTransaction {
        let mut m =
            MobileTransaction::new(1, rs.iter().copied().collect(), BTreeSet::new(), 0).unwrap();
        m.transition(MtState::Listening).unwrap();
        m
    }

    fn header(item: ItemId, version: u64, tick: Tick) -> ClientEvent<'static> {
        ClientEvent::ItemHeader {
            channel: 0,
            item,
            version,
            tick,
        }
    }

    fn received(item: ItemId, value: u64, tick: Tick) -> ClientEvent<'static> {
        ClientEvent::ItemReceived {
            channel: 0,
            item,
            value,
            stamp: 0,
            cycle: 1,
            header_tick: tick,
        }
    }

    #[test]
    fn one_check_per_header_until_target() {
        let mut m = mt(&[4]);
        let mut c = FreshClient::new(BTreeSet::from([0]));
        let mut checks = 0;
        let mut committed = false;
        for (pos, item) in [0u32, 1, 2, 3, 4].iter().enumerate() {
            let tick = pos as u64 * 11;
            c.step(&mut m, ClientEvent::DrainedBoundary { channel: 0, tick }).unwrap();
            let mut actions = c.step(&mut m, header(*item, 0, tick)).unwrap();
            if *item == 4 {
                actions.extend(c.step(&mut m, received(4, 0, tick)).unwrap());
            }
            for a in actions {
                match a {
                    ClientAction::Check { count } => checks += count,
                    ClientAction::CommitLocal => committed = true,
                    _ => {}
                }
            }
        }
        assert_eq!(checks, 5);
        assert!(committed);
    }

    #[test]
    fn newer_version_of_read_item_restarts() {
        let mut m = mt(&[0, 2]);
        let mut c = FreshClient::new(BTreeSet::from([0]));
        c.step(&mut m, header(0, 3, 0)).unwrap();
        c.step(&mut m, received(0, 3, 0)).unwrap();
        let actions = c.step(&mut m, header(0, 4, 5)).unwrap();
        assert!(actions.contains(&ClientAction::AbortRestart));
        assert!(actions.contains(&ClientAction::ListenItem { channel: 0, item: 0 }));
        // same version again is ignored
        let mut m2 = mt(&[0, 2]);
        let mut c2 = FreshClient::new(BTreeSet::from([0]));
        c2.step(&mut m2, header(0, 3, 0)).unwrap();
        c2.step(&mut m2, received(0, 3, 0)).unwrap();
        assert_eq!(
            c2.step(&mut m2, header(0, 3, 5)).unwrap(),
            vec![ClientAction::Check { count: 1 }]
        );
    }

    #[test]
    fn commit_waits_for_other_channel_to_drain() {
        let mut m = mt(&[0, 1]);
        let mut c = FreshClient::new(BTreeSet::from([0, 1]));
        let hdr = |channel, item, tick| ClientEvent::ItemHeader {
            channel,
            item,
            version: 0,
            tick,
        };
        let rcv = |channel, item, header_tick| ClientEvent::ItemReceived {
            channel,
            item,
            value: 0,
            stamp: 0,
            cycle: 1,
            header_tick,
        };
        c.step(&mut m, hdr(0, 0, 0)).unwrap();
        c.step(&mut m, rcv(0, 0, 0)).unwrap();
        c.step(&mut m, ClientEvent::DrainedBoundary { channel: 1, tick: 20 }).unwrap();
        c.step(&mut m, hdr(1, 1, 20)).unwrap();
        c.step(&mut m, ClientEvent::DrainedBoundary { channel: 0, tick: 10 }).unwrap();
        assert!(c.step(&mut m, rcv(1, 1, 20)).unwrap().is_empty());
        assert_eq!(
            c.step(&mut m, ClientEvent::DrainedBoundary { channel: 0, tick: 30 }).unwrap(),
            vec![ClientAction::CommitLocal]
        );
    }

    #[test]
    fn write_set_is_a_configuration_error() {
        let mut m =
            MobileTransaction::new(1, BTreeSet::from([0]), BTreeSet::from([0]), 0).unwrap();
        m.transition(MtState::Listening).unwrap();
        let mut c = FreshClient::new(BTreeSet::from([0]));
        assert_eq!(
            c.step(&mut m, header(0, 0, 0)),
            Err(ProtocolError::WriteUnderFresh)
        );
    }
}
