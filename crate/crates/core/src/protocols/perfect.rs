use std::collections::BTreeSet;

use super::{ClientAction, ClientEvent, FrameView, ProtocolError, ProtocolId};
use crate::client::{TuneEntry, TunePlan, TunePurpose};
use crate::model::{MobileTransaction, MtState, Observation};
use crate::{ChannelId, ItemId, Tick};

/// Wake exactly for the payloads of every unread item, provided all of them
/// are still ahead of `now` in the cycle on the air. `None` means the client
/// has to wait for the next cycle.
pub fn perfect_oracle_plan(
    mt: &MobileTransaction,
    program: &[FrameView<'_>],
    now: Tick,
) -> Option<TunePlan> {
    let mut entries = Vec::new();
    for item in mt.unread() {
        let (channel, (wake, sleep)) = program
            .iter()
            .find_map(|v| v.item_span(item).map(|span| (v.channel, span)))?;
        if wake < now {
            return None;
        }
        entries.push(TuneEntry {
            channel,
            wake,
            sleep,
            purpose: TunePurpose::Item(item),
        });
    }
    entries.sort_by_key(|e| (e.wake, e.channel));
    Some(TunePlan { entries })
}

/// Zero-overhead oracle client.
#[derive(Debug, Clone)]
pub struct PerfectClient {
    tuned: BTreeSet<ChannelId>,
    awaiting: BTreeSet<ItemId>,
    decided: bool,
}

impl PerfectClient {
    pub fn new(tuned: BTreeSet<ChannelId>) -> Self {
        PerfectClient {
            tuned,
            awaiting: BTreeSet::new(),
            decided: false,
        }
    }

    pub fn tuned(&self) -> &BTreeSet<ChannelId> {
        &self.tuned
    }

    pub fn reset_plan(&mut self) {
        self.awaiting.clear();
        self.decided = false;
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
            ClientEvent::CycleStart { .. } => {
                self.awaiting.clear();
                Ok(Vec::new())
            }
            ClientEvent::Schedule { program, now } => {
                if !Self::listening(mt) || !self.awaiting.is_empty() {
                    return Ok(Vec::new());
                }
                let Some(plan) = perfect_oracle_plan(mt, program, now) else {
                    return Ok(Vec::new());
                };
                let mut actions = Vec::new();
                for e in &plan.entries {
                    if let TunePurpose::Item(item) = e.purpose {
                        if !self.tuned.contains(&e.channel) {
                            return Err(ProtocolError::UntunedChannel(e.channel));
                        }
                        self.awaiting.insert(item);
                        actions.push(ClientAction::Doze { until: e.wake });
                        actions.push(ClientAction::ListenItem {
                            channel: e.channel,
                            item,
                        });
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
                if !self.awaiting.remove(&item) {
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
                protocol: ProtocolId::Perfect,
                event: other.name(),
            }),
        }
    }

    fn maybe_decide(&mut self, mt: &MobileTransaction) -> Vec<ClientAction> {
        if self.decided || !self.awaiting.is_empty() || !mt.all_read() || !Self::listening(mt) {
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
    use crate::model::{build_cycle_frame, DataItem, FrameLayout};

    fn frame(sizes: &[u32]) -> crate::model::CycleFrame {
        let mut items: Vec<DataItem> = sizes
            .iter()
            .enumerate()
            .map(|(i, s)| DataItem::new(i as ItemId, *s))
            .collect();
        let layout = FrameLayout {
            header_units: 0,
            entry_units: 0,
        };
        build_cycle_frame(&mut items, 0, 1, layout).unwrap()
    }

    fn mt(rs: &[ItemId]) -> MobileTransaction {
        let mut mt =
            MobileTransaction::new(1, rs.iter().copied().collect(), BTreeSet::new(), 0).unwrap();
        mt.transition(MtState::Listening).unwrap();
        mt
    }

    fn listen_ticks(plan: &TunePlan) -> u64 {
        plan.entries.iter().map(|e| e.sleep - e.wake).sum()
    }

    #[test]
    fn single_item_costs_its_size() {
        let f = frame(&[5, 10, 20]);
        let program = [FrameView {
            channel: 0,
            frame: &f,
            payload_start: 0,
        }];
        let plan = perfect_oracle_plan(&mt(&[1]), &program, 0).unwrap();
        assert_eq!(listen_ticks(&plan), 10);
        let plan = perfect_oracle_plan(&mt(&[1, 2]), &program, 0).unwrap();
        assert_eq!(listen_ticks(&plan), 30);
        assert!(plan.is_well_formed());
    }

    #[test]
    fn item_already_passed_waits_for_next_cycle() {
        let f = frame(&[5, 10, 20]);
        let program = [FrameView {
            channel: 0,
            frame: &f,
            payload_start: 0,
        }];
        assert!(perfect_oracle_plan(&mt(&[0, 2]), &program, 3).is_none());
        assert!(perfect_oracle_plan(&mt(&[2]), &program, 3).is_some());
    }

    #[test]
    fn response_time_is_end_of_last_item() {
        let f = frame(&[5, 10, 20]);
        let program = [FrameView {
            channel: 0,
            frame: &f,
            payload_start: 100,
        }];
        let mut m = mt(&[0, 2]);
        let mut c = PerfectClient::new(BTreeSet::from([0]));
        let actions = c
            .step(&mut m, ClientEvent::Schedule { program: &program, now: 100 })
            .unwrap();
        assert_eq!(actions[0], ClientAction::Doze { until: 100 });
        let last_end = program[0].item_span(2).unwrap().1;
        assert_eq!(last_end, 135);
        for (item, tick) in [(0, 100), (2, 115)] {
            let out = c
                .step(
                    &mut m,
                    ClientEvent::ItemReceived {
                        channel: 0,
                        item,
                        value: 0,
                        stamp: 0,
                        cycle: 1,
                        header_tick: tick,
                    },
                )
                .unwrap();
            if item == 2 {
                assert_eq!(out, vec![ClientAction::CommitLocal]);
            } else {
                assert!(out.is_empty());
            }
        }
        assert_eq!(last_end - m.created_tick, 135);
    }
}
