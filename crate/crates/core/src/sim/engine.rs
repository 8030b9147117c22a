use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use super::config::{ArrivalMode, ConfigError, SimConfig};
use super::metrics::{CycleSample, MetricsRecord};
use super::oracle::CommitRecord;
use super::trace::{TraceEvent, TraceRecord};
use crate::client::{
    generate_mt, Activity, ClientEffect, ClientError, CommitMode, PowerParams, WcState,
    WorkloadConfig, WorkloadError,
};
use crate::model::{build_cycle_frame, CycleFrame, FrameError, FrameLayout, MtState};
use crate::protocols::{
    nxn_build_matrix, ClientEvent, ClientLogic, ControlConfig, FrameView, FreshBroadcaster,
    McdScheduler, NxnMatrix, ProtocolError, ProtocolId, Transmission, FRESH_ITEM_HEADER_UNITS,
};
use crate::server::{
    assign_channels, channel_groups, ContentProvider, CpDatabase, CpEffect, LockEvent,
    ServerError, ValidationOutcome, ValidationRequest, ValidationResult,
};
use crate::{ChannelId, ClientId, Cycle, ItemId, Tick, TxnId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("tick {tick}: {what}")]
    Invariant { tick: Tick, what: String },
    #[error("tick {tick}: event refers to retired {what}")]
    Retired { tick: Tick, what: String },
}

const STREAM_UPDATES: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_WORKLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Control,
    Item(ItemId),
}

#[derive(Debug, Clone, PartialEq)]
enum Message {
    Validate(ValidationRequest),
    Result {
        client: ClientId,
        outcome: ValidationOutcome,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    CycleStart,
    /// End of a transmitted segment (index-based protocols).
    WordTx { channel: ChannelId, segment: Segment },
    /// Fresh: the current transmission on `channel` ends and the next begins.
    ItemBoundary { channel: ChannelId },
    UpdateCommit { item: ItemId },
    BackchannelDeliver(Message),
    MtArrival { client: ClientId },
    ValidationDone { txn: TxnId },
    LockTimeout { txn: TxnId },
}

#[derive(Debug, Clone)]
struct OnAir {
    frame: CycleFrame,
    control_len: u64,
    payload_start: Tick,
}

#[derive(Debug, Clone)]
struct InFlight {
    tx: Transmission,
    value: u64,
    stamp: Cycle,
    header_tick: Tick,
    listeners: BTreeSet<ClientId>,
}

#[derive(Debug, Clone)]
struct FreshChannel {
    broadcaster: FreshBroadcaster,
    inflight: Option<InFlight>,
    boundary_pending: bool,
}

#[derive(Debug, Clone, Default)]
struct CycleAcc {
    control: u64,
    payload: u64,
    retransmission: u64,
    busy: u64,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: SimConfig,
    pub metrics: MetricsRecord,
    pub trace: Vec<TraceRecord>,
    pub commits: Vec<CommitRecord>,
    pub lock_log: Vec<LockEvent>,
    pub db: CpDatabase,
    pub events: u64,
}

/// The simulated network: content provider, broadcaster, clients and the
/// event queue.
pub struct World {
    cfg: SimConfig,
    protocol: ProtocolId,
    params: PowerParams,
    control: ControlConfig,
    workload: WorkloadConfig,
    sizes: Vec<u32>,
    cp: ContentProvider,
    channel_of: Vec<ChannelId>,
    groups: Vec<Vec<ItemId>>,
    scheduler: McdScheduler,
    fresh: Vec<FreshChannel>,
    clients: Vec<WcState>,
    remaining: Vec<u32>,
    workload_rng: Vec<ChaCha8Rng>,
    update_rng: ChaCha8Rng,
    arrival_rng: ChaCha8Rng,
    queue: BTreeMap<(Tick, u64), Event>,
    next_ordinal: u64,
    now: Tick,
    cycle: Cycle,
    cycle_start: Tick,
    cycle_len: u64,
    on_air: Vec<OnAir>,
    matrix: Option<NxnMatrix>,
    acc: CycleAcc,
    busy_until: Vec<Tick>,
    index_listeners: Vec<BTreeSet<ClientId>>,
    item_listeners: BTreeMap<(ChannelId, ItemId), BTreeSet<ClientId>>,
    validated_at: BTreeMap<TxnId, (u64, Cycle)>,
    next_txn: TxnId,
    metrics: MetricsRecord,
    trace: Vec<TraceRecord>,
    commits: Vec<CommitRecord>,
    lock_log: Vec<LockEvent>,
    events: u64,
    finished: bool,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl World {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let protocol = cfg.protocol;
        let sizes = cfg.sizes();
        let channel_of = assign_channels(cfg.n_items, cfg.n_channels);
        let groups = channel_groups(&channel_of, cfg.n_channels);
        let scheduler = McdScheduler::new(groups.clone(), channel_of.clone(), cfg.items_per_cycle);
        let fresh = groups
            .iter()
            .map(|g| FreshChannel {
                broadcaster: FreshBroadcaster::new(g.clone()),
                inflight: None,
                boundary_pending: false,
            })
            .collect();
        let n_ch = cfg.n_channels as usize;
        let workload = cfg.workload();
        workload.validate(cfg.n_items)?;
        let mut world = World {
            protocol,
            params: cfg.power(),
            control: cfg.control(),
            workload,
            cp: ContentProvider::new(CpDatabase::with_sizes(&sizes), protocol == ProtocolId::Mcd),
            sizes,
            channel_of,
            groups,
            scheduler,
            fresh,
            clients: (0..cfg.n_clients as ClientId).map(WcState::new).collect(),
            remaining: vec![cfg.mts_per_client; cfg.n_clients],
            workload_rng: (0..cfg.n_clients as u64)
                .map(|c| stream(cfg.seed, STREAM_WORKLOAD + c))
                .collect(),
            update_rng: stream(cfg.seed, STREAM_UPDATES),
            arrival_rng: stream(cfg.seed, STREAM_ARRIVALS),
            queue: BTreeMap::new(),
            next_ordinal: 0,
            now: 0,
            cycle: 0,
            cycle_start: 0,
            cycle_len: 0,
            on_air: Vec::new(),
            matrix: None,
            acc: CycleAcc::default(),
            busy_until: vec![0; n_ch],
            index_listeners: vec![BTreeSet::new(); n_ch],
            item_listeners: BTreeMap::new(),
            validated_at: BTreeMap::new(),
            next_txn: 1,
            metrics: MetricsRecord::default(),
            trace: Vec::new(),
            commits: Vec::new(),
            lock_log: Vec::new(),
            events: 0,
            finished: false,
            cfg,
        };
        if world.cfg.zero_horizon() {
            world.finished = true;
            return Ok(world);
        }
        for c in 0..world.cfg.n_clients as ClientId {
            let at = world.think_time();
            world.push(at, Event::MtArrival { client: c });
        }
        world.push(0, Event::CycleStart);
        Ok(world)
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn cycle(&self) -> Cycle {
        self.cycle
    }

    pub fn is_finished(&self) -> bool {
        self.finished || self.queue.is_empty()
    }

    fn push(&mut self, tick: Tick, event: Event) {
        self.queue.insert((tick, self.next_ordinal), event);
        self.next_ordinal += 1;
    }

    fn think_time(&mut self) -> Tick {
        match self.cfg.arrival {
            ArrivalMode::Start => 0,
            ArrivalMode::Poisson => {
                let exp = Exp::new(1.0 / self.cfg.mean_interarrival_ticks)
                    .expect("validated interarrival mean");
                exp.sample(&mut self.arrival_rng).floor() as Tick
            }
        }
    }

    fn log(&mut self, actor: impl Into<String>, event: TraceEvent) {
        if self.cfg.trace {
            self.trace.push(TraceRecord {
                tick: self.now,
                actor: actor.into(),
                event,
            });
        }
    }

    fn invariant(&self, what: impl Into<String>) -> SimError {
        SimError::Invariant {
            tick: self.now,
            what: what.into(),
        }
    }

    fn layout(&self) -> FrameLayout {
        match self.protocol {
            ProtocolId::Mcd => self.control.layout,
            ProtocolId::NxN => FrameLayout {
                header_units: self.control.layout.header_units,
                entry_units: 0,
            },
            ProtocolId::Perfect | ProtocolId::Fresh => FrameLayout {
                header_units: 0,
                entry_units: 0,
            },
        }
    }

    /// Processes the next event. Returns `false` once the run is over.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.finished {
            return Ok(false);
        }
        let Some(((tick, _), event)) = self.queue.pop_first() else {
            self.finished = true;
            return Ok(false);
        };
        if tick < self.now {
            return Err(self.invariant("time went backwards"));
        }
        if self.cfg.horizon_ticks.is_some_and(|h| tick >= h) {
            self.finished = true;
            return Ok(false);
        }
        self.now = tick;
        self.events += 1;
        match event {
            Event::CycleStart => {
                if self.cfg.horizon_cycles.is_some_and(|h| self.cycle >= h) {
                    self.close_cycle()?;
                    self.finished = true;
                    return Ok(false);
                }
                self.cycle_start_event()?;
            }
            Event::WordTx { channel, segment } => self.segment_end(channel, segment)?,
            Event::ItemBoundary { channel } => self.item_boundary(channel)?,
            Event::UpdateCommit { item } => self.update_commit(item)?,
            Event::BackchannelDeliver(Message::Validate(req)) => self.cp_receive(req)?,
            Event::BackchannelDeliver(Message::Result { client, outcome }) => {
                self.client_result(client, outcome)?
            }
            Event::MtArrival { client } => self.mt_arrival(client)?,
            Event::ValidationDone { txn } => self.validation_done(txn)?,
            Event::LockTimeout { txn } => self.lock_timeout(txn)?,
        }
        self.drain_lock_log();
        if self.cfg.check_invariants {
            self.check_invariants()?;
        }
        Ok(true)
    }

    fn check_invariants(&self) -> Result<(), SimError> {
        self.cp
            .locks
            .check_invariants()
            .map_err(|e| self.invariant(format!("lock safety: {e}")))?;
        for wc in &self.clients {
            let rereading = wc
                .active_mt
                .as_ref()
                .is_some_and(|m| m.state == MtState::Rereading);
            if rereading != !wc.pending_reread.is_empty() {
                return Err(self.invariant(format!(
                    "client {}: pending re-reads out of step with state",
                    wc.client_id
                )));
            }
        }
        Ok(())
    }

    fn drain_lock_log(&mut self) {
        for e in self.cp.drain_lock_log() {
            self.log("cp", TraceEvent::Lock(e.clone()));
            self.lock_log.push(e);
        }
    }

    /// Reserves `[start, start + len)` on a channel.
    fn occupy(&mut self, channel: ChannelId, start: Tick, len: u64) -> Result<(), SimError> {
        let ch = channel as usize;
        if start < self.busy_until[ch] {
            return Err(self.invariant(format!("channel {channel} transmits two words at once")));
        }
        self.busy_until[ch] = start + len;
        Ok(())
    }

    fn close_cycle(&mut self) -> Result<(), SimError> {
        if self.cycle == 0 {
            return Ok(());
        }
        let acc = std::mem::take(&mut self.acc);
        if acc.control + acc.payload + acc.retransmission != acc.busy {
            return Err(self.invariant(format!(
                "cycle {}: control {} + payload {} + retransmission {} != busy {}",
                self.cycle, acc.control, acc.payload, acc.retransmission, acc.busy
            )));
        }
        self.metrics.cycles.push(CycleSample {
            cycle: self.cycle,
            start: self.cycle_start,
            length: self.now - self.cycle_start,
            control: acc.control,
            payload: acc.payload,
            retransmission: acc.retransmission,
            busy: acc.busy,
        });
        Ok(())
    }

    fn draw_updates(&mut self, base_len: u64) {
        for item in 0..self.cfg.n_items as ItemId {
            if self.update_rng.random_bool(self.cfg.update_rate) {
                let u: f64 = self.update_rng.random();
                let at = self.now + (u * base_len as f64).floor() as u64;
                self.push(at, Event::UpdateCommit { item });
            }
        }
    }

    fn cycle_start_event(&mut self) -> Result<(), SimError> {
        self.close_cycle()?;
        self.cycle += 1;
        self.cycle_start = self.now;
        for l in &mut self.index_listeners {
            l.clear();
        }
        self.item_listeners.clear();
        if self.protocol == ProtocolId::Fresh {
            return self.fresh_cycle_start();
        }

        let priority = self.cp.take_priority();
        let schedule = self.scheduler.schedule_cycle(&self.cp.db, &priority);
        // the matrix reflects disseminations before this cycle's frames
        self.matrix = (self.protocol == ProtocolId::NxN).then(|| {
            nxn_build_matrix(&self.cp.db, self.cycle, self.control.cell_bits, self.control.unit_bits)
        });
        let matrix_units = self.matrix.as_ref().map_or(0, |m| m.size_units);
        let layout = self.layout();
        let mut on_air = Vec::with_capacity(schedule.len());
        for (ch, sc) in schedule.iter().enumerate() {
            let mut items: Vec<_> = sc.items.iter().map(|i| self.cp.db.items[i].clone()).collect();
            let frame = build_cycle_frame(&mut items, ch as ChannelId, self.cycle, layout)?;
            for it in items {
                self.cp.db.items.insert(it.id, it);
            }
            self.cp.db.current_cycle.insert(ch as ChannelId, self.cycle);
            let control_len = frame.control_length() + matrix_units;
            on_air.push(OnAir {
                payload_start: self.now + control_len,
                control_len,
                frame,
            });
        }
        let cycle_len = on_air
            .iter()
            .map(|a| a.control_len + a.frame.payload_length)
            .max()
            .unwrap_or(0)
            .max(1);
        self.cycle_len = cycle_len;
        self.draw_updates(cycle_len);

        for (ch, air) in on_air.iter().enumerate() {
            let channel = ch as ChannelId;
            self.log(
                "dc",
                TraceEvent::Cycle {
                    cycle: self.cycle,
                    channel,
                    schedule: schedule[ch].items.clone(),
                    priority_len: schedule[ch].priority_len,
                    control: air.control_len,
                    length: air.control_len + air.frame.payload_length,
                },
            );
            self.occupy(channel, self.now, air.control_len + air.frame.payload_length)?;
            self.acc.control += air.control_len;
            self.acc.payload += air.frame.payload_length;
            if air.control_len > 0 {
                self.push(
                    self.now + air.control_len,
                    Event::WordTx {
                        channel,
                        segment: Segment::Control,
                    },
                );
            }
            for e in &air.frame.index {
                self.push(
                    air.payload_start + u64::from(e.offset) + u64::from(e.size),
                    Event::WordTx {
                        channel,
                        segment: Segment::Item(e.item_id),
                    },
                );
            }
        }
        self.on_air = on_air;
        self.push(self.now + cycle_len, Event::CycleStart);

        for c in 0..self.clients.len() {
            if self.clients[c].active_mt.is_none() {
                continue;
            }
            let cycle = self.cycle;
            let effects = self.clients[c].drive(ClientEvent::CycleStart { cycle }, self.now, &self.params)?;
            self.apply_effects(c as ClientId, effects)?;
            if self.protocol == ProtocolId::Perfect && self.clients[c].active_mt.is_some() {
                let program = views(&self.on_air);
                let effects = self.clients[c].drive(
                    ClientEvent::Schedule {
                        program: &program,
                        now: self.now,
                    },
                    self.now,
                    &self.params,
                )?;
                self.apply_effects(c as ClientId, effects)?;
            }
        }
        Ok(())
    }

    fn segment_end(&mut self, channel: ChannelId, segment: Segment) -> Result<(), SimError> {
        let ch = channel as usize;
        let Some(air) = self.on_air.get(ch) else {
            return Err(SimError::Retired {
                tick: self.now,
                what: format!("channel {channel}"),
            });
        };
        match segment {
            Segment::Control => {
                self.acc.busy += air.control_len;
                let control_len = air.control_len;
                let listeners = std::mem::take(&mut self.index_listeners[ch]);
                for c in listeners {
                    let wc = &mut self.clients[c as usize];
                    if wc.active_mt.is_none() {
                        continue;
                    }
                    wc.charge(
                        Activity::Listen {
                            ticks: control_len,
                            control: true,
                        },
                        &self.params,
                    );
                    let program = views(&self.on_air);
                    let event = match &self.matrix {
                        Some(matrix) => ClientEvent::MatrixDecoded {
                            matrix,
                            program: &program,
                        },
                        None => ClientEvent::IndexDecoded { view: program[ch] },
                    };
                    let effects = wc.drive(event, self.now, &self.params)?;
                    self.apply_effects(c, effects)?;
                }
            }
            Segment::Item(item) => {
                let entry = *crate::model::locate_item(&air.frame, item).ok_or_else(|| {
                    SimError::Retired {
                        tick: self.now,
                        what: format!("item {item} on channel {channel}"),
                    }
                })?;
                let value = air.frame.value_of(item).unwrap_or_default();
                let header_tick = air.payload_start + u64::from(entry.offset);
                self.acc.busy += u64::from(entry.size);
                let listeners = self.item_listeners.remove(&(channel, item)).unwrap_or_default();
                for c in listeners {
                    let wc = &mut self.clients[c as usize];
                    let Some(mt) = wc.active_mt.as_ref() else {
                        continue;
                    };
                    let txn = mt.txn_id;
                    wc.charge(
                        Activity::Listen {
                            ticks: u64::from(entry.size),
                            control: false,
                        },
                        &self.params,
                    );
                    let effects = wc.drive(
                        ClientEvent::ItemReceived {
                            channel,
                            item,
                            value,
                            stamp: entry.last_updated_cycle,
                            cycle: self.cycle,
                            header_tick,
                        },
                        self.now,
                        &self.params,
                    )?;
                    self.log(
                        format!("wc{c}"),
                        TraceEvent::Read {
                            client: c,
                            txn,
                            channel,
                            item,
                            value,
                            stamp: entry.last_updated_cycle,
                            cycle: self.cycle,
                        },
                    );
                    self.apply_effects(c, effects)?;
                }
            }
        }
        Ok(())
    }

    fn fresh_cycle_start(&mut self) -> Result<(), SimError> {
        let base_len = self
            .groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|i| u64::from(self.sizes[*i as usize] + FRESH_ITEM_HEADER_UNITS))
                    .sum::<u64>()
            })
            .max()
            .unwrap_or(0)
            .max(1);
        self.cycle_len = base_len;
        self.draw_updates(base_len);
        for ch in 0..self.fresh.len() {
            self.fresh[ch].broadcaster.start_pass();
            self.log(
                "dc",
                TraceEvent::Cycle {
                    cycle: self.cycle,
                    channel: ch as ChannelId,
                    schedule: self.groups[ch].clone(),
                    priority_len: 0,
                    control: 0,
                    length: self.groups[ch]
                        .iter()
                        .map(|i| u64::from(self.sizes[*i as usize] + FRESH_ITEM_HEADER_UNITS))
                        .sum(),
                },
            );
            self.schedule_boundary(ch as ChannelId);
        }
        for c in 0..self.clients.len() {
            if self.clients[c].active_mt.is_some() {
                let cycle = self.cycle;
                let effects =
                    self.clients[c].drive(ClientEvent::CycleStart { cycle }, self.now, &self.params)?;
                self.apply_effects(c as ClientId, effects)?;
            }
        }
        Ok(())
    }

    fn schedule_boundary(&mut self, channel: ChannelId) {
        let fc = &mut self.fresh[channel as usize];
        if fc.inflight.is_none() && !fc.boundary_pending {
            fc.boundary_pending = true;
            self.push(self.now, Event::ItemBoundary { channel });
        }
    }

    fn fresh_clients_on(&self, channel: ChannelId) -> Vec<ClientId> {
        self.clients
            .iter()
            .filter(|wc| wc.active_mt.is_some() && wc.tuned_channels.contains(&channel))
            .map(|wc| wc.client_id)
            .collect()
    }

    fn item_boundary(&mut self, channel: ChannelId) -> Result<(), SimError> {
        let ch = channel as usize;
        self.fresh[ch].boundary_pending = false;
        if let Some(done) = self.fresh[ch].inflight.take() {
            let item = done.tx.item();
            self.acc.busy += u64::from(self.sizes[item as usize] + FRESH_ITEM_HEADER_UNITS);
            for c in done.listeners {
                let wc = &mut self.clients[c as usize];
                let Some(mt) = wc.active_mt.as_ref() else {
                    continue;
                };
                let txn = mt.txn_id;
                let effects = wc.drive(
                    ClientEvent::ItemReceived {
                        channel,
                        item,
                        value: done.value,
                        stamp: done.stamp,
                        cycle: self.cycle,
                        header_tick: done.header_tick,
                    },
                    self.now,
                    &self.params,
                )?;
                self.log(
                    format!("wc{c}"),
                    TraceEvent::Read {
                        client: c,
                        txn,
                        channel,
                        item,
                        value: done.value,
                        stamp: done.stamp,
                        cycle: self.cycle,
                    },
                );
                self.apply_effects(c, effects)?;
            }
        }

        match self.fresh[ch].broadcaster.next_transmission() {
            Some(tx) => {
                let item = tx.item();
                let len = u64::from(self.sizes[item as usize] + FRESH_ITEM_HEADER_UNITS);
                self.occupy(channel, self.now, len)?;
                match tx {
                    Transmission::Cyclic(_) => self.acc.payload += len,
                    Transmission::Retransmission(_) => self.acc.retransmission += len,
                }
                let db_item = self.cp.db.item(item)?;
                let (value, stamp) = (db_item.value, db_item.last_updated_cycle);
                self.fresh[ch].inflight = Some(InFlight {
                    tx,
                    value,
                    stamp,
                    header_tick: self.now,
                    listeners: BTreeSet::new(),
                });
                self.fresh[ch].boundary_pending = true;
                self.push(self.now + len, Event::ItemBoundary { channel });
                self.log(
                    "dc",
                    TraceEvent::Tx {
                        channel,
                        item,
                        version: value,
                        retransmission: matches!(tx, Transmission::Retransmission(_)),
                    },
                );
                for c in self.fresh_clients_on(channel) {
                    if matches!(tx, Transmission::Cyclic(_)) {
                        let effects = self.clients[c as usize].drive(
                            ClientEvent::DrainedBoundary {
                                channel,
                                tick: self.now,
                            },
                            self.now,
                            &self.params,
                        )?;
                        self.apply_effects(c, effects)?;
                    }
                    if self.clients[c as usize].active_mt.is_none() {
                        continue;
                    }
                    let effects = self.clients[c as usize].drive(
                        ClientEvent::ItemHeader {
                            channel,
                            item,
                            version: value,
                            tick: self.now,
                        },
                        self.now,
                        &self.params,
                    )?;
                    self.apply_effects(c, effects)?;
                }
            }
            None => {
                for c in self.fresh_clients_on(channel) {
                    if let Some(crate::protocols::ClientLogic::Fresh(f)) =
                        self.clients[c as usize].logic.as_mut()
                    {
                        f.channel_idle(channel);
                    }
                    let effects = self.clients[c as usize].drive(
                        ClientEvent::DrainedBoundary {
                            channel,
                            tick: self.now,
                        },
                        self.now,
                        &self.params,
                    )?;
                    self.apply_effects(c, effects)?;
                }
                let all_idle = self
                    .fresh
                    .iter()
                    .all(|f| f.inflight.is_none() && !f.boundary_pending && f.broadcaster.pass_complete());
                if all_idle {
                    self.push(self.now, Event::CycleStart);
                }
            }
        }
        Ok(())
    }

    fn update_commit(&mut self, item: ItemId) -> Result<(), SimError> {
        let stamp = self.cycle + 1;
        let effects = self.cp.local_update(item, stamp, self.now)?;
        self.cp_effects(effects)
    }

    fn cp_effects(&mut self, effects: Vec<CpEffect>) -> Result<(), SimError> {
        for e in effects {
            match e {
                CpEffect::LocalApplied { item, record, .. } => {
                    self.log(
                        "cp",
                        TraceEvent::Update {
                            item,
                            stamp: record.cycle,
                            value: Some(record.value),
                            deferred: false,
                        },
                    );
                    if self.protocol == ProtocolId::Fresh {
                        let channel = self.channel_of[item as usize];
                        self.fresh[channel as usize].broadcaster.on_update(item);
                        self.schedule_boundary(channel);
                    }
                }
                CpEffect::LocalDeferred { item, .. } => self.log(
                    "cp",
                    TraceEvent::Update {
                        item,
                        stamp: self.cycle + 1,
                        value: None,
                        deferred: true,
                    },
                ),
                CpEffect::ValidationLocked { txn } => {
                    self.push(self.now + self.cfg.validation_ticks, Event::ValidationDone { txn })
                }
                CpEffect::ValidationQueued { txn } => {
                    let timeout = (self.cfg.lock_timeout_cycles * self.cycle_len as f64).ceil() as u64;
                    self.push(self.now + timeout, Event::LockTimeout { txn })
                }
            }
        }
        Ok(())
    }

    fn cp_receive(&mut self, req: ValidationRequest) -> Result<(), SimError> {
        let effect = self.cp.receive_validation(req)?;
        self.cp_effects(vec![effect])
    }

    fn send_result(&mut self, outcome: ValidationOutcome) -> Result<(), SimError> {
        let client = self
            .clients
            .iter()
            .find(|wc| wc.active_mt.as_ref().is_some_and(|m| m.txn_id == outcome.txn))
            .map(|wc| wc.client_id)
            .ok_or_else(|| SimError::Retired {
                tick: self.now,
                what: format!("txn {}", outcome.txn),
            })?;
        self.log(
            "cp",
            TraceEvent::Result {
                client,
                txn: outcome.txn,
                result: outcome.result.clone(),
            },
        );
        self.push(
            self.now + self.cfg.backchannel_latency_ticks,
            Event::BackchannelDeliver(Message::Result { client, outcome }),
        );
        Ok(())
    }

    fn validation_done(&mut self, txn: TxnId) -> Result<(), SimError> {
        let seq = self.cp.db.installs;
        let (outcome, effects) = self.cp.finish_validation(txn, self.cycle + 1, self.now)?;
        if outcome.result == ValidationResult::Committed {
            self.validated_at.insert(txn, (seq, self.cycle));
        }
        // the RESULT leaves before the released locks are reused
        self.send_result(outcome)?;
        self.cp_effects(effects)
    }

    fn lock_timeout(&mut self, txn: TxnId) -> Result<(), SimError> {
        if let Some((outcome, effects)) = self.cp.timeout_validation(txn, self.cycle + 1, self.now)? {
            self.send_result(outcome)?;
            self.cp_effects(effects)?;
        }
        Ok(())
    }

    fn client_result(&mut self, client: ClientId, outcome: ValidationOutcome) -> Result<(), SimError> {
        let effects = self.clients[client as usize].on_result(&outcome, self.now, &self.params)?;
        let reread = effects.iter().any(|e| matches!(e, ClientEffect::Reread(_)));
        self.apply_effects(client, effects)?;
        if reread && self.protocol == ProtocolId::Perfect && self.cycle > 0 {
            let program = views(&self.on_air);
            let effects = self.clients[client as usize].activate(&program, self.now, &self.params)?;
            self.apply_effects(client, effects)?;
        }
        Ok(())
    }

    fn mt_arrival(&mut self, client: ClientId) -> Result<(), SimError> {
        let c = client as usize;
        if self.clients[c].active_mt.is_some() {
            return Err(self.invariant(format!("client {client} already runs a transaction")));
        }
        let txn = self.next_txn;
        self.next_txn += 1;
        self.remaining[c] -= 1;
        let mt = generate_mt(
            &mut self.workload_rng[c],
            &self.workload,
            self.cfg.n_items,
            txn,
            self.now,
        )?;
        self.log(
            format!("wc{client}"),
            TraceEvent::Arrival {
                client,
                txn,
                read_set: mt.read_set.clone(),
                write_set: mt.write_set.clone(),
            },
        );
        let logic = ClientLogic::new(self.protocol, &mt, &self.channel_of, self.cfg.single_tuner)?;
        self.clients[c].start_mt(mt, logic)?;
        let program = if self.cycle > 0 && self.protocol == ProtocolId::Perfect {
            views(&self.on_air)
        } else {
            Vec::new()
        };
        let effects = self.clients[c].activate(&program, self.now, &self.params)?;
        self.apply_effects(client, effects)
    }

    fn txn_of(&self, client: ClientId) -> TxnId {
        self.clients[client as usize]
            .active_mt
            .as_ref()
            .map_or(0, |m| m.txn_id)
    }

    fn tune_log(&mut self, client: ClientId, channel: ChannelId, purpose: &str, item: Option<ItemId>) {
        let txn = self.txn_of(client);
        self.log(
            format!("wc{client}"),
            TraceEvent::Tune {
                client,
                txn,
                channel,
                purpose: purpose.to_string(),
                item,
            },
        );
    }

    fn apply_effects(&mut self, client: ClientId, effects: Vec<ClientEffect>) -> Result<(), SimError> {
        for effect in effects {
            match effect {
                ClientEffect::ListenIndex { channel } | ClientEffect::ListenMatrix { channel } => {
                    if self.now != self.cycle_start || self.on_air.len() <= channel as usize {
                        return Err(self.invariant(format!(
                            "client {client} asked for the index of channel {channel} after it started"
                        )));
                    }
                    self.index_listeners[channel as usize].insert(client);
                    let purpose = if self.matrix.is_some() { "matrix" } else { "index" };
                    self.tune_log(client, channel, purpose, None);
                }
                ClientEffect::ListenItem { channel, item } => {
                    if self.protocol == ProtocolId::Fresh {
                        let Some(f) = self.fresh[channel as usize].inflight.as_mut() else {
                            return Err(self.invariant(format!("nothing on the air on channel {channel}")));
                        };
                        if f.tx.item() != item || f.header_tick != self.now {
                            return Err(self.invariant(format!(
                                "client {client} missed the header of item {item}"
                            )));
                        }
                        f.listeners.insert(client);
                    } else {
                        let start = self
                            .on_air
                            .get(channel as usize)
                            .and_then(|a| {
                                crate::model::locate_item(&a.frame, item)
                                    .map(|e| a.payload_start + u64::from(e.offset))
                            })
                            .ok_or_else(|| self.invariant(format!("item {item} not on channel {channel}")))?;
                        if start < self.now {
                            return Err(self.invariant(format!(
                                "client {client} tuned to item {item} after it started"
                            )));
                        }
                        self.item_listeners
                            .entry((channel, item))
                            .or_default()
                            .insert(client);
                    }
                    self.tune_log(client, channel, "item", Some(item));
                }
                ClientEffect::ListenContinuous { channel } => {
                    self.tune_log(client, channel, "continuous", None)
                }
                ClientEffect::Validate(req) => {
                    self.log(
                        format!("wc{client}"),
                        TraceEvent::ValidateSent {
                            client,
                            txn: req.txn,
                            reads: req.reads.clone(),
                            writes: req.writes.clone(),
                        },
                    );
                    self.push(
                        self.now + self.cfg.backchannel_latency_ticks,
                        Event::BackchannelDeliver(Message::Validate(req)),
                    );
                }
                ClientEffect::Restarted => {
                    let txn = self.txn_of(client);
                    self.log(format!("wc{client}"), TraceEvent::Restart { client, txn });
                }
                ClientEffect::Reread(items) => {
                    let txn = self.txn_of(client);
                    self.log(format!("wc{client}"), TraceEvent::Reread { client, txn, items });
                }
                ClientEffect::Committed(sample, mt) => {
                    let reads: Vec<(ItemId, u64)> =
                        mt.observed.iter().map(|(i, o)| (*i, o.value)).collect();
                    let (cp_seq, commit_cycle) = match sample.mode {
                        CommitMode::Local => (None, self.cycle),
                        CommitMode::Validated => {
                            let (seq, cycle) = self.validated_at.remove(&mt.txn_id).ok_or_else(|| {
                                self.invariant(format!("txn {} committed without validation", mt.txn_id))
                            })?;
                            (Some(seq), cycle)
                        }
                    };
                    let event = match sample.mode {
                        CommitMode::Local => TraceEvent::CommitLocal {
                            client,
                            txn: mt.txn_id,
                            reads: reads.clone(),
                        },
                        CommitMode::Validated => TraceEvent::Commit {
                            client,
                            txn: mt.txn_id,
                            mode: sample.mode,
                            reads: reads.clone(),
                            writes: mt.write_set.iter().copied().collect(),
                        },
                    };
                    self.log(format!("wc{client}"), event);
                    self.commits.push(CommitRecord {
                        client,
                        txn: mt.txn_id,
                        mode: sample.mode,
                        commit_tick: self.now,
                        commit_cycle,
                        reads: reads.into_iter().collect(),
                        writes: mt.write_set.clone(),
                        cp_seq,
                    });
                    self.metrics.samples.push(sample);
                    if self.remaining[client as usize] > 0 {
                        let at = self.now + self.think_time();
                        self.push(at, Event::MtArrival { client });
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs to the horizon and hands back the results.
    pub fn run(mut self) -> Result<RunOutput, SimError> {
        while self.step()? {}
        self.finish()
    }

    /// Results so far; also valid before the horizon is reached.
    pub fn finish(mut self) -> Result<RunOutput, SimError> {
        self.drain_lock_log();
        self.metrics.incomplete = self.clients.iter().filter(|wc| wc.active_mt.is_some()).count() as u64;
        Ok(RunOutput {
            config: self.cfg,
            metrics: self.metrics,
            trace: self.trace,
            commits: self.commits,
            lock_log: self.lock_log,
            db: self.cp.db,
            events: self.events,
        })
    }
}

fn views(on_air: &[OnAir]) -> Vec<FrameView<'_>> {
    on_air
        .iter()
        .enumerate()
        .map(|(ch, a)| FrameView {
            channel: ch as ChannelId,
            frame: &a.frame,
            payload_start: a.payload_start,
        })
        .collect()
}

/// Runs one simulation.
pub fn run(config: SimConfig) -> Result<RunOutput, SimError> {
    World::new(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(protocol: ProtocolId) -> SimConfig {
        SimConfig {
            protocol,
            n_items: 8,
            item_size: 4,
            n_clients: 3,
            horizon_cycles: Some(6),
            trace: true,
            ..Default::default()
        }
    }

    #[test]
    fn zero_horizon_does_nothing() {
        let out = run(SimConfig {
            horizon_cycles: Some(0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(out.events, 0);
        assert!(out.metrics.samples.is_empty() && out.metrics.cycles.is_empty());
        assert!(out.trace.is_empty());
    }

    #[test]
    fn runs_are_repeatable() {
        for p in ProtocolId::ALL {
            let a = run(small(p)).unwrap();
            let b = run(small(p)).unwrap();
            assert_eq!(a, b, "{p}");
        }
    }

    #[test]
    fn no_updates_means_local_commits_only() {
        let out = run(SimConfig {
            update_rate: 0.0,
            ..small(ProtocolId::Mcd)
        })
        .unwrap();
        assert_eq!(out.metrics.samples.len(), 3);
        assert!(out.metrics.samples.iter().all(|s| s.mode == CommitMode::Local && s.rejections == 0));
    }

    #[test]
    fn cycle_start_schedules_full_frame() {
        let mut w = World::new(SimConfig {
            update_rate: 0.0,
            ..small(ProtocolId::Mcd)
        })
        .unwrap();
        // three arrivals, then the first cycle start
        for _ in 0..4 {
            w.step().unwrap();
        }
        assert_eq!(w.cycle(), 1);
        // header 2 + 8 entries of 2 + 8 items of 4
        assert_eq!(w.cycle_len, 2 + 16 + 32);
        let ends: Vec<_> = w
            .queue
            .iter()
            .filter(|(_, e)| matches!(e, Event::WordTx { .. }))
            .map(|((t, _), _)| *t)
            .collect();
        assert_eq!(ends.len(), 9);
        assert_eq!(*ends.iter().max().unwrap(), 50);
    }

    #[test]
    fn backchannel_latency_is_exact() {
        let out = run(SimConfig {
            write_prob: 1.0,
            update_rate: 0.0,
            ..small(ProtocolId::Mcd)
        })
        .unwrap();
        let mut sent: BTreeMap<TxnId, Tick> = BTreeMap::new();
        let mut checked = 0;
        for r in &out.trace {
            match &r.event {
                TraceEvent::ValidateSent { txn, .. } => {
                    sent.insert(*txn, r.tick);
                }
                TraceEvent::Result { txn, result, .. } => {
                    // latency plus at least one tick of processing
                    assert!(r.tick >= sent[txn] + 11);
                    if *result == ValidationResult::Committed {
                        let s = out.metrics.samples.iter().find(|s| s.txn == *txn).unwrap();
                        assert_eq!(s.committed_tick, r.tick + 10);
                        checked += 1;
                    }
                }
                _ => {}
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn fresh_update_interrupts_within_one_item() {
        let out = run(SimConfig {
            update_rate: 0.5,
            ..small(ProtocolId::Fresh)
        })
        .unwrap();
        let tx_ticks: Vec<_> = out
            .trace
            .iter()
            .filter(|r| matches!(r.event, TraceEvent::Tx { .. }))
            .map(|r| r.tick)
            .collect();
        for r in out.trace.iter() {
            if let TraceEvent::Update { item, .. } = r.event {
                // the retransmission starts at the first boundary at or after the update
                let next = out.trace.iter().find(|t| {
                    t.tick >= r.tick
                        && matches!(t.event, TraceEvent::Tx { item: i, retransmission: true, .. } if i == item)
                });
                let boundary = tx_ticks.iter().copied().filter(|t| *t >= r.tick).min();
                if let (Some(next), Some(b)) = (next, boundary) {
                    assert!(next.tick >= b);
                    assert!(next.tick <= b + 5 * 8, "retransmission too late");
                }
            }
        }
    }
}
