//! Wireless-client actor: workload generation, tuning plans, energy
//! accounting and the mobile-transaction driver.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MobileTransaction, MtState, TxnError};
use crate::protocols::{ClientAction, ClientEvent, ClientLogic, ProtocolError, ProtocolId};
use crate::server::{ReadValue, ValidationOutcome, ValidationRequest, ValidationResult};
use crate::{ChannelId, ClientId, ItemId, Tick, TxnId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("client {client}: no active transaction")]
    Idle { client: ClientId },
    #[error("client {client}: RESULT for unknown txn {txn}")]
    UnknownResult { client: ClientId, txn: TxnId },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Txn(#[from] TxnError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("rs_max = {rs_max} exceeds the database size {n_items}")]
    ReadSetTooLarge { rs_max: usize, n_items: usize },
    #[error("rs_min = {rs_min} must be between 1 and rs_max = {rs_max}")]
    BadRange { rs_min: usize, rs_max: usize },
    #[error("fixed item {item} is outside the database of {n_items} items")]
    FixedItem { item: ItemId, n_items: usize },
    #[error("zipf_theta = {0} must be a non-negative number")]
    Theta(f64),
}

/// Power model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerParams {
    pub p_listen: f64,
    pub p_check: f64,
    pub p_tx: f64,
    /// Whether backchannel messages count towards PC.
    pub include_tx: bool,
}

impl Default for PowerParams {
    fn default() -> Self {
        PowerParams {
            p_listen: 1.0,
            p_check: 0.1,
            p_tx: 5.0,
            include_tx: true,
        }
    }
}

/// What a client did for a stretch of time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activity {
    Doze { ticks: u64 },
    /// `control` marks index or matrix listening.
    Listen { ticks: u64, control: bool },
    ListenCheck { ticks: u64, checks: u64 },
    BackchannelTx { messages: u64 },
}

/// Energy spent by one transaction. `control` is the part of `listen`
/// spent on index or matrix reception.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyMeter {
    pub listen: f64,
    pub control: f64,
    pub check: f64,
    pub tx: f64,
}

impl EnergyMeter {
    pub fn total(&self) -> f64 {
        self.listen + self.check + self.tx
    }
}

pub fn charge_energy(meter: EnergyMeter, activity: Activity, params: &PowerParams) -> EnergyMeter {
    let mut m = meter;
    match activity {
        Activity::Doze { .. } => {}
        Activity::Listen { ticks, control } => {
            let e = ticks as f64 * params.p_listen;
            m.listen += e;
            if control {
                m.control += e;
            }
        }
        Activity::ListenCheck { ticks, checks } => {
            m.listen += ticks as f64 * params.p_listen;
            m.check += checks as f64 * params.p_check;
        }
        Activity::BackchannelTx { messages } => {
            if params.include_tx {
                m.tx += messages as f64 * params.p_tx;
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunePurpose {
    Index,
    Item(ItemId),
    Matrix,
    Continuous,
}

/// One awake interval `[wake, sleep)` on a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuneEntry {
    pub channel: ChannelId,
    pub wake: Tick,
    pub sleep: Tick,
    pub purpose: TunePurpose,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunePlan {
    pub entries: Vec<TuneEntry>,
}

impl TunePlan {
    /// Intervals are non-empty, and on each channel increasing and
    /// non-overlapping.
    pub fn is_well_formed(&self) -> bool {
        let mut last: BTreeMap<ChannelId, Tick> = BTreeMap::new();
        for e in &self.entries {
            if e.sleep <= e.wake {
                return false;
            }
            if let Some(prev) = last.get(&e.channel) {
                if e.wake < *prev {
                    return false;
                }
            }
            last.insert(e.channel, e.sleep);
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub rs_min: usize,
    pub rs_max: usize,
    pub write_prob: f64,
    /// Zipf skew over item ids; `None` draws uniformly.
    pub zipf_theta: Option<f64>,
    /// Every transaction reads exactly this item.
    pub fixed_item: Option<ItemId>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            rs_min: 1,
            rs_max: 5,
            write_prob: 0.0,
            zipf_theta: None,
            fixed_item: None,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self, n_items: usize) -> Result<(), WorkloadError> {
        if let Some(item) = self.fixed_item {
            if item as usize >= n_items {
                return Err(WorkloadError::FixedItem { item, n_items });
            }
            return Ok(());
        }
        if self.rs_max > n_items {
            return Err(WorkloadError::ReadSetTooLarge {
                rs_max: self.rs_max,
                n_items,
            });
        }
        if self.rs_min == 0 || self.rs_min > self.rs_max {
            return Err(WorkloadError::BadRange {
                rs_min: self.rs_min,
                rs_max: self.rs_max,
            });
        }
        if let Some(t) = self.zipf_theta {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(WorkloadError::Theta(t));
            }
        }
        Ok(())
    }
}

/// Draws one transaction: a read set of uniform size in `[rs_min, rs_max]`
/// without replacement and, with probability `write_prob`, a non-empty
/// write set inside it.
pub fn generate_mt<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &WorkloadConfig,
    n_items: usize,
    txn_id: TxnId,
    created_tick: Tick,
) -> Result<MobileTransaction, WorkloadError> {
    cfg.validate(n_items)?;
    let read_set: BTreeSet<ItemId> = if let Some(item) = cfg.fixed_item {
        BTreeSet::from([item])
    } else {
        let k = rng.random_range(cfg.rs_min..=cfg.rs_max);
        match cfg.zipf_theta {
            None => sample(rng, n_items, k).iter().map(|i| i as ItemId).collect(),
            Some(theta) => {
                let zipf = Zipf::new(n_items as f64, theta)
                    .map_err(|_| WorkloadError::Theta(theta))?;
                let mut set = BTreeSet::new();
                while set.len() < k {
                    let rank = zipf.sample(rng) as usize;
                    set.insert((rank.clamp(1, n_items) - 1) as ItemId);
                }
                set
            }
        }
    };
    let write_set = if cfg.write_prob > 0.0 && rng.random_bool(cfg.write_prob.min(1.0)) {
        let items: Vec<ItemId> = read_set.iter().copied().collect();
        let w = rng.random_range(1..=items.len());
        sample(rng, items.len(), w).iter().map(|i| items[i]).collect()
    } else {
        BTreeSet::new()
    };
    MobileTransaction::new(txn_id, read_set, write_set, created_tick)
        .map_err(|_| unreachable!("write set drawn from the read set"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitMode {
    Local,
    Validated,
}

/// Per-transaction outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtSample {
    pub client: ClientId,
    pub txn: TxnId,
    pub mode: CommitMode,
    pub created_tick: Tick,
    pub committed_tick: Tick,
    pub rt: f64,
    pub pc: f64,
    pub pc_listen: f64,
    pub pc_control: f64,
    pub pc_check: f64,
    pub pc_tx: f64,
    pub checks: u64,
    pub restarts: u32,
    pub rejections: u32,
    pub reread_items: u64,
    pub rs_size: usize,
    pub ws_size: usize,
}

/// What the engine has to do on the client's behalf.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientEffect {
    ListenIndex { channel: ChannelId },
    ListenMatrix { channel: ChannelId },
    ListenItem { channel: ChannelId, item: ItemId },
    ListenContinuous { channel: ChannelId },
    Validate(ValidationRequest),
    Restarted,
    Reread(BTreeSet<ItemId>),
    Committed(MtSample, MobileTransaction),
}

/// Wireless-client state.
#[derive(Debug, Clone)]
pub struct WcState {
    pub client_id: ClientId,
    pub tuned_channels: BTreeSet<ChannelId>,
    pub active_mt: Option<MobileTransaction>,
    pub energy: EnergyMeter,
    pub pending_reread: BTreeSet<ItemId>,
    pub logic: Option<ClientLogic>,
    pub checks: u64,
    pub reread_items: u64,
    pub completed: u32,
    continuous_since: BTreeMap<ChannelId, Tick>,
}

impl WcState {
    pub fn new(client_id: ClientId) -> Self {
        WcState {
            client_id,
            tuned_channels: BTreeSet::new(),
            active_mt: None,
            energy: EnergyMeter::default(),
            pending_reread: BTreeSet::new(),
            logic: None,
            checks: 0,
            reread_items: 0,
            completed: 0,
            continuous_since: BTreeMap::new(),
        }
    }

    pub fn protocol(&self) -> Option<ProtocolId> {
        self.logic.as_ref().map(|l| l.protocol())
    }

    /// Takes on a freshly generated transaction and starts listening.
    pub fn start_mt(&mut self, mut mt: MobileTransaction, logic: ClientLogic) -> Result<(), ClientError> {
        mt.transition(MtState::Listening)?;
        self.tuned_channels = logic.tuned_channels().clone();
        self.logic = Some(logic);
        self.active_mt = Some(mt);
        self.energy = EnergyMeter::default();
        self.pending_reread.clear();
        self.checks = 0;
        self.reread_items = 0;
        self.continuous_since.clear();
        Ok(())
    }

    pub fn charge(&mut self, activity: Activity, params: &PowerParams) {
        self.energy = charge_energy(self.energy, activity, params);
        if let Activity::ListenCheck { checks, .. } = activity {
            self.checks += checks;
        }
    }

    fn settle_continuous(&mut self, now: Tick, params: &PowerParams) {
        let since = std::mem::take(&mut self.continuous_since);
        for (_, t) in since {
            self.charge(
                Activity::Listen {
                    ticks: now - t,
                    control: false,
                },
                params,
            );
        }
    }

    fn commit(
        &mut self,
        mode: CommitMode,
        now: Tick,
        params: &PowerParams,
    ) -> Result<ClientEffect, ClientError> {
        self.settle_continuous(now, params);
        let mut mt = self.active_mt.take().ok_or(ClientError::Idle {
            client: self.client_id,
        })?;
        if mt.state == MtState::Rereading {
            mt.transition(MtState::Listening)?;
        }
        mt.transition(MtState::Committed)?;
        mt.committed_tick = Some(now);
        self.logic = None;
        self.pending_reread.clear();
        self.completed += 1;
        let e = self.energy;
        let sample = MtSample {
            client: self.client_id,
            txn: mt.txn_id,
            mode,
            created_tick: mt.created_tick,
            committed_tick: now,
            rt: (now - mt.created_tick) as f64 + self.checks as f64 * params.p_check,
            pc: e.total(),
            pc_listen: e.listen,
            pc_control: e.control,
            pc_check: e.check,
            pc_tx: e.tx,
            checks: self.checks,
            restarts: mt.restarts,
            rejections: mt.rejections,
            reread_items: self.reread_items,
            rs_size: mt.read_set.len(),
            ws_size: mt.write_set.len(),
        };
        Ok(ClientEffect::Committed(sample, mt))
    }

    fn apply(
        &mut self,
        actions: Vec<ClientAction>,
        now: Tick,
        params: &PowerParams,
    ) -> Result<Vec<ClientEffect>, ClientError> {
        let mut effects = Vec::new();
        for action in actions {
            match action {
                ClientAction::Doze { .. } => {}
                ClientAction::ListenIndex { channel } => {
                    effects.push(ClientEffect::ListenIndex { channel })
                }
                ClientAction::ListenMatrix { channel } => {
                    effects.push(ClientEffect::ListenMatrix { channel })
                }
                ClientAction::ListenItem { channel, item } => {
                    if self.active_mt.as_ref().is_some_and(|m| m.state == MtState::Rereading) {
                        self.reread_items += 1;
                    }
                    effects.push(ClientEffect::ListenItem { channel, item })
                }
                ClientAction::ListenContinuous { channel } => {
                    self.continuous_since.entry(channel).or_insert(now);
                    effects.push(ClientEffect::ListenContinuous { channel });
                }
                ClientAction::Check { count } => self.charge(
                    Activity::ListenCheck {
                        ticks: 0,
                        checks: u64::from(count),
                    },
                    params,
                ),
                ClientAction::CommitLocal => {
                    effects.push(self.commit(CommitMode::Local, now, params)?);
                    break;
                }
                ClientAction::SendValidation => {
                    let mt = self.active_mt.as_mut().ok_or(ClientError::Idle {
                        client: self.client_id,
                    })?;
                    if mt.state == MtState::Rereading {
                        mt.transition(MtState::Listening)?;
                        self.pending_reread.clear();
                    }
                    mt.transition(MtState::Validating)?;
                    let request = ValidationRequest {
                        txn: mt.txn_id,
                        client: self.client_id,
                        reads: mt
                            .observed
                            .iter()
                            .map(|(item, o)| ReadValue {
                                item: *item,
                                value: o.value,
                                stamp: o.stamp,
                            })
                            .collect(),
                        writes: mt.pending_writes().into_iter().collect(),
                    };
                    self.charge(Activity::BackchannelTx { messages: 1 }, params);
                    effects.push(ClientEffect::Validate(request));
                }
                ClientAction::RereadPending(items) => {
                    self.pending_reread = items;
                }
                ClientAction::AbortRestart => {
                    let mt = self.active_mt.as_mut().ok_or(ClientError::Idle {
                        client: self.client_id,
                    })?;
                    mt.transition(MtState::Aborted)?;
                    mt.clear_for_restart();
                    mt.transition(MtState::Listening)?;
                    effects.push(ClientEffect::Restarted);
                }
            }
        }
        Ok(effects)
    }

    /// Feeds one protocol event to the active transaction.
    pub fn drive(
        &mut self,
        event: ClientEvent<'_>,
        now: Tick,
        params: &PowerParams,
    ) -> Result<Vec<ClientEffect>, ClientError> {
        let (Some(mt), Some(logic)) = (self.active_mt.as_mut(), self.logic.as_mut()) else {
            return Err(ClientError::Idle {
                client: self.client_id,
            });
        };
        let actions = logic.step(mt, event)?;
        if mt.state == MtState::Rereading
            && self.pending_reread.iter().all(|i| mt.observed.contains_key(i))
        {
            mt.transition(MtState::Listening)?;
            self.pending_reread.clear();
        }
        self.apply(actions, now, params)
    }

    /// Activation right after `start_mt` or after a rejection.
    pub fn activate(
        &mut self,
        program: &[crate::protocols::FrameView<'_>],
        now: Tick,
        params: &PowerParams,
    ) -> Result<Vec<ClientEffect>, ClientError> {
        let (Some(mt), Some(logic)) = (self.active_mt.as_mut(), self.logic.as_mut()) else {
            return Err(ClientError::Idle {
                client: self.client_id,
            });
        };
        let actions = logic.activate(mt, program, now)?;
        self.apply(actions, now, params)
    }

    /// Handles RESULT from the CP.
    pub fn on_result(
        &mut self,
        outcome: &ValidationOutcome,
        now: Tick,
        params: &PowerParams,
    ) -> Result<Vec<ClientEffect>, ClientError> {
        let unknown = ClientError::UnknownResult {
            client: self.client_id,
            txn: outcome.txn,
        };
        let protocol = self.protocol().ok_or(ClientError::Idle {
            client: self.client_id,
        })?;
        let Some(mt) = self.active_mt.as_mut() else {
            return Err(unknown);
        };
        if mt.txn_id != outcome.txn || mt.state != MtState::Validating {
            return Err(unknown);
        }
        match &outcome.result {
            ValidationResult::Committed => Ok(vec![self.commit(CommitMode::Validated, now, params)?]),
            ValidationResult::Rejected(_) => {
                mt.rejections += 1;
                let stale = outcome.stale_items();
                if protocol.rereads_partially() {
                    for item in &stale {
                        mt.observed.remove(item);
                    }
                    mt.transition(MtState::Rereading)?;
                    self.pending_reread = stale.clone();
                    if let Some(l) = self.logic.as_mut() {
                        l.reset_plan();
                    }
                    Ok(vec![ClientEffect::Reread(stale)])
                } else {
                    mt.transition(MtState::Aborted)?;
                    mt.clear_for_restart();
                    mt.transition(MtState::Listening)?;
                    if let Some(l) = self.logic.as_mut() {
                        l.reset_plan();
                    }
                    Ok(vec![ClientEffect::Restarted])
                }
            }
        }
    }
}

/// Drives the active transaction of `wc` with one event.
pub fn drive_mt(
    wc: &mut WcState,
    event: ClientEvent<'_>,
    now: Tick,
    params: &PowerParams,
) -> Result<Vec<ClientEffect>, ClientError> {
    wc.drive(event, now, params)
}
