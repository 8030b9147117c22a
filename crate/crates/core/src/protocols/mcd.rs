use std::collections::{BTreeMap, BTreeSet};

use super::{ClientAction, ClientEvent, FrameView, ProtocolError, ProtocolId};
use crate::model::{check_consistency, MobileTransaction, MtState, Observation};
use crate::server::CpDatabase;
use crate::{ChannelId, Cycle, ItemId};

/// One channel's transmission order for a cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledChannel {
    pub items: Vec<ItemId>,
    /// Leading items that are priority rebroadcasts.
    pub priority_len: usize,
}

/// Server-side cycle scheduler shared by the index-based protocols.
///
/// Order within a channel: priority rebroadcasts, then (subset dissemination
/// only) items updated since their last broadcast, then a round-robin walk
/// over the channel's item group until the capacity is reached. A cycle's
/// schedule is fixed once built.
#[derive(Debug, Clone)]
pub struct McdScheduler {
    groups: Vec<Vec<ItemId>>,
    channel_of: Vec<ChannelId>,
    cursors: Vec<usize>,
    capacity: Option<usize>,
}

impl McdScheduler {
    /// `capacity` is the per-channel item budget; `None` broadcasts every
    /// item of the group each cycle.
    pub fn new(groups: Vec<Vec<ItemId>>, channel_of: Vec<ChannelId>, capacity: Option<usize>) -> Self {
        let cursors = vec![0; groups.len()];
        McdScheduler {
            groups,
            channel_of,
            cursors,
            capacity,
        }
    }

    fn full(&self, channel: usize) -> bool {
        self.capacity.is_none_or(|c| c >= self.groups[channel].len())
    }

    pub fn schedule_cycle(&mut self, db: &CpDatabase, priority: &[ItemId]) -> Vec<ScheduledChannel> {
        let mut out: Vec<ScheduledChannel> = self
            .groups
            .iter()
            .map(|_| ScheduledChannel {
                items: Vec::new(),
                priority_len: 0,
            })
            .collect();
        let mut placed: BTreeSet<ItemId> = BTreeSet::new();

        for item in priority {
            if placed.insert(*item) {
                let ch = self.channel_of[*item as usize] as usize;
                out[ch].items.push(*item);
                out[ch].priority_len += 1;
            }
        }

        for ch in 0..self.groups.len() {
            let group = &self.groups[ch];
            if self.full(ch) {
                out[ch]
                    .items
                    .extend(group.iter().filter(|i| !placed.contains(i)).copied());
                continue;
            }
            let capacity = self.capacity.unwrap_or(group.len());
            for item in group {
                let updated = db
                    .items
                    .get(item)
                    .is_some_and(|d| d.updated_since_dissemination());
                if updated && placed.insert(*item) {
                    out[ch].items.push(*item);
                }
            }
            let mut walked = 0;
            while out[ch].items.len() < capacity && walked < group.len() {
                let item = group[(self.cursors[ch] + walked) % group.len()];
                walked += 1;
                if placed.insert(item) {
                    out[ch].items.push(item);
                }
            }
            self.cursors[ch] = (self.cursors[ch] + walked) % group.len().max(1);
        }
        out
    }
}

/// MCD client: reads the index of every tuned channel each cycle, dozes until
/// the needed payloads, and decides once nothing is left to read.
#[derive(Debug, Clone)]
pub struct McdClient {
    tuned: BTreeSet<ChannelId>,
    single_tuner: bool,
    next_single: usize,
    cycle: Cycle,
    index_view: BTreeMap<ItemId, Cycle>,
    awaiting_index: BTreeSet<ChannelId>,
    awaiting_items: BTreeSet<ItemId>,
    decided_this_cycle: bool,
}

impl McdClient {
    pub fn new(tuned: BTreeSet<ChannelId>, single_tuner: bool) -> Self {
        McdClient {
            tuned,
            single_tuner,
            next_single: 0,
            cycle: 0,
            index_view: BTreeMap::new(),
            awaiting_index: BTreeSet::new(),
            awaiting_items: BTreeSet::new(),
            decided_this_cycle: false,
        }
    }

    pub fn tuned(&self) -> &BTreeSet<ChannelId> {
        &self.tuned
    }

    pub fn reset_plan(&mut self) {
        self.awaiting_index.clear();
        self.awaiting_items.clear();
    }

    /// Index view assembled from this cycle's indices so far.
    pub fn index_view(&self) -> &BTreeMap<ItemId, Cycle> {
        &self.index_view
    }

    fn listening(mt: &MobileTransaction) -> bool {
        matches!(mt.state, MtState::Listening | MtState::Rereading)
    }

    pub fn step(
        &mut self,
        mt: &mut MobileTransaction,
        event: ClientEvent<'_>,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        match event {
            ClientEvent::CycleStart { cycle } => Ok(self.on_cycle_start(mt, cycle)),
            ClientEvent::IndexDecoded { view } => self.on_index(mt, view),
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
                protocol: ProtocolId::Mcd,
                event: other.name(),
            }),
        }
    }

    fn on_cycle_start(&mut self, mt: &MobileTransaction, cycle: Cycle) -> Vec<ClientAction> {
        self.cycle = cycle;
        self.index_view.clear();
        self.awaiting_items.clear();
        self.awaiting_index.clear();
        self.decided_this_cycle = false;
        if !Self::listening(mt) {
            return Vec::new();
        }
        if self.single_tuner {
            let channels: Vec<ChannelId> = self.tuned.iter().copied().collect();
            if let Some(ch) = channels.get(self.next_single % channels.len().max(1)) {
                self.awaiting_index.insert(*ch);
            }
            self.next_single += 1;
        } else {
            self.awaiting_index = self.tuned.clone();
        }
        self.awaiting_index
            .iter()
            .map(|ch| ClientAction::ListenIndex { channel: *ch })
            .collect()
    }

    fn on_index(
        &mut self,
        mt: &mut MobileTransaction,
        view: FrameView<'_>,
    ) -> Result<Vec<ClientAction>, ProtocolError> {
        if !self.tuned.contains(&view.channel) {
            return Err(ProtocolError::UntunedChannel(view.channel));
        }
        if !self.awaiting_index.remove(&view.channel) {
            return Ok(Vec::new());
        }
        self.index_view.extend(view.frame.index_view());
        let mut actions = Vec::new();
        for item in mt.unread() {
            if let Some((start, _)) = view.item_span(item) {
                if self.awaiting_items.insert(item) {
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

    fn maybe_decide(&mut self, mt: &MobileTransaction) -> Vec<ClientAction> {
        if self.decided_this_cycle
            || !self.awaiting_index.is_empty()
            || !self.awaiting_items.is_empty()
            || !mt.all_read()
            || !Self::listening(mt)
        {
            return Vec::new();
        }
        let report = check_consistency(mt, &self.index_view);
        if !report.unknown_items.is_empty() && !self.single_tuner {
            // no freshness information yet; try again next cycle
            return Vec::new();
        }
        self.decided_this_cycle = true;
        if report.consistent && mt.is_read_only() {
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
    use crate::server::{apply_local_update, assign_channels, channel_groups};

    fn scheduler(n: usize, channels: u32, capacity: Option<usize>) -> McdScheduler {
        let assignment = assign_channels(n, channels);
        McdScheduler::new(channel_groups(&assignment, channels), assignment, capacity)
    }

    #[test]
    fn priority_item_leads_its_channel() {
        let db = CpDatabase::with_sizes(&[1; 6]);
        let mut s = scheduler(6, 2, None);
        let out = s.schedule_cycle(&db, &[4]);
        assert_eq!(out[0].items, vec![4, 0, 2]);
        assert_eq!(out[0].priority_len, 1);
        assert_eq!(out[1].items, vec![1, 3, 5]);
    }

    #[test]
    fn full_group_without_priorities() {
        let db = CpDatabase::with_sizes(&[1; 5]);
        let mut s = scheduler(5, 1, Some(10));
        assert_eq!(s.schedule_cycle(&db, &[])[0].items, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn mid_cycle_update_appears_next_cycle_flagged() {
        // capacity 2 of 6: round robin would skip item 5 in cycle 2
        let mut db = CpDatabase::with_sizes(&[1; 6]);
        let mut s = scheduler(6, 1, Some(2));

        let sched1 = s.schedule_cycle(&db, &[]);
        let ids1 = sched1[0].items.clone();
        let mut items: Vec<_> = ids1.iter().map(|i| db.items[i].clone()).collect();
        build_cycle_frame(&mut items, 0, 1, FrameLayout::default()).unwrap();
        for it in items {
            db.items.insert(it.id, it);
        }
        // update during cycle 1 is stamped for cycle 2
        apply_local_update(&mut db, 5, 2, 10).unwrap();
        assert!(!ids1.contains(&5));

        let sched2 = s.schedule_cycle(&db, &[]);
        assert!(sched2[0].items.contains(&5));
        let mut items: Vec<_> = sched2[0].items.iter().map(|i| db.items[i].clone()).collect();
        let frame = build_cycle_frame(&mut items, 0, 2, FrameLayout::default()).unwrap();
        let e = crate::model::locate_item(&frame, 5).unwrap();
        assert!(e.updated_flag);
        assert_eq!(e.last_updated_cycle, 2);
    }

    #[test]
    fn subset_round_robin_covers_group() {
        let db = CpDatabase::with_sizes(&[1; 5]);
        let mut s = scheduler(5, 1, Some(2));
        let mut seen = BTreeSet::new();
        for _ in 0..3 {
            let out = s.schedule_cycle(&db, &[]);
            assert_eq!(out[0].items.len(), 2);
            seen.extend(out[0].items.iter().copied());
        }
        assert_eq!(seen.len(), 5);
    }

    fn frame_of(db: &mut CpDatabase, ids: &[ItemId], cycle: Cycle) -> crate::model::CycleFrame {
        let mut items: Vec<_> = ids.iter().map(|i| db.items[i].clone()).collect();
        let f = build_cycle_frame(&mut items, 0, cycle, FrameLayout::default()).unwrap();
        for it in items {
            db.items.insert(it.id, it);
        }
        f
    }

    fn mt(rs: &[ItemId], ws: &[ItemId]) -> MobileTransaction {
        let mut m = MobileTransaction::new(
            1,
            rs.iter().copied().collect(),
            ws.iter().copied().collect(),
            0,
        )
        .unwrap();
        m.transition(MtState::Listening).unwrap();
        m
    }

    fn read_all(
        c: &mut McdClient,
        m: &mut MobileTransaction,
        view: FrameView<'_>,
    ) -> Vec<ClientAction> {
        let mut actions = c.step(m, ClientEvent::IndexDecoded { view }).unwrap();
        let wanted: Vec<ItemId> = actions
            .iter()
            .filter_map(|a| match a {
                ClientAction::ListenItem { item, .. } => Some(*item),
                _ => None,
            })
            .collect();
        for item in wanted {
            let e = crate::model::locate_item(view.frame, item).unwrap();
            actions.extend(
                c.step(
                    m,
                    ClientEvent::ItemReceived {
                        channel: 0,
                        item,
                        value: view.frame.value_of(item).unwrap(),
                        stamp: e.last_updated_cycle,
                        cycle: view.frame.cycle,
                        header_tick: 0,
                    },
                )
                .unwrap(),
            );
        }
        actions
    }

    #[test]
    fn read_only_single_cycle_commits_locally() {
        let mut db = CpDatabase::with_sizes(&[10; 4]);
        let frame = frame_of(&mut db, &[0, 1, 2, 3], 1);
        let view = FrameView {
            channel: 0,
            frame: &frame,
            payload_start: 10,
        };
        let mut m = mt(&[1, 3], &[]);
        let mut c = McdClient::new(BTreeSet::from([0]), false);
        assert_eq!(
            c.step(&mut m, ClientEvent::CycleStart { cycle: 1 }).unwrap(),
            vec![ClientAction::ListenIndex { channel: 0 }]
        );
        let actions = read_all(&mut c, &mut m, view);
        assert_eq!(actions.last(), Some(&ClientAction::CommitLocal));
        assert!(actions.contains(&ClientAction::Doze { until: 20 }));
    }

    #[test]
    fn write_set_goes_to_validation() {
        let mut db = CpDatabase::with_sizes(&[10; 4]);
        let frame = frame_of(&mut db, &[0, 1, 2, 3], 1);
        let view = FrameView {
            channel: 0,
            frame: &frame,
            payload_start: 0,
        };
        let mut m = mt(&[1, 3], &[3]);
        let mut c = McdClient::new(BTreeSet::from([0]), false);
        c.step(&mut m, ClientEvent::CycleStart { cycle: 1 }).unwrap();
        let actions = read_all(&mut c, &mut m, view);
        assert_eq!(actions.last(), Some(&ClientAction::SendValidation));
        assert_eq!(m.pending_writes(), BTreeMap::from([(3, 1)]));
    }

    #[test]
    fn rereading_listens_only_for_stale_items() {
        let mut db = CpDatabase::with_sizes(&[10; 6]);
        let frame = frame_of(&mut db, &[0, 1, 2, 3, 4, 5], 1);
        let view = FrameView {
            channel: 0,
            frame: &frame,
            payload_start: 0,
        };
        let mut m = mt(&[1, 4], &[4]);
        let mut c = McdClient::new(BTreeSet::from([0]), false);
        c.step(&mut m, ClientEvent::CycleStart { cycle: 1 }).unwrap();
        read_all(&mut c, &mut m, view);

        // CP rejected item 4
        m.transition(MtState::Validating).unwrap();
        m.transition(MtState::Rereading).unwrap();
        m.observed.remove(&4);
        apply_local_update(&mut db, 4, 2, 50).unwrap();
        let frame2 = frame_of(&mut db, &[4, 0, 1, 2, 3, 5], 2);
        let view2 = FrameView {
            channel: 0,
            frame: &frame2,
            payload_start: 40,
        };
        c.step(&mut m, ClientEvent::CycleStart { cycle: 2 }).unwrap();
        let actions = c.step(&mut m, ClientEvent::IndexDecoded { view: view2 }).unwrap();
        assert_eq!(
            actions,
            vec![
                ClientAction::Doze { until: 40 },
                ClientAction::ListenItem { channel: 0, item: 4 }
            ]
        );
    }

    #[test]
    fn untuned_channel_is_rejected() {
        let mut db = CpDatabase::with_sizes(&[10; 2]);
        let frame = frame_of(&mut db, &[0, 1], 1);
        let mut m = mt(&[0], &[]);
        let mut c = McdClient::new(BTreeSet::from([0]), false);
        c.step(&mut m, ClientEvent::CycleStart { cycle: 1 }).unwrap();
        let err = c
            .step(
                &mut m,
                ClientEvent::IndexDecoded {
                    view: FrameView {
                        channel: 3,
                        frame: &frame,
                        payload_start: 0,
                    },
                },
            )
            .unwrap_err();
        assert_eq!(err, ProtocolError::UntunedChannel(3));
    }
}
