//! Deterministic simulator and protocol library for multi-channel push-based
//! data dissemination.
//!
//! The crate is organised around the actors of a dissemination network:
//!
//! * [`model`]: items, cycle frames, the air index and the client-side
//!   consistency test.
//! * [`codec`]: little-endian binary layout of a cycle frame.
//! * [`protocols`]: MCD and the `fresh`, `nxn` and `perfect` baselines.
//! * [`server`]: content-provider database, S/X lock manager, backchannel
//!   validation and channel assignment.
//! * [`client`]: wireless-client workload, energy accounting and the mobile
//!   transaction driver.
//! * [`sim`]: the discrete-event engine, metrics and the serializability
//!   oracle.

pub mod client;
pub mod codec;
pub mod model;
pub mod protocols;
pub mod server;
pub mod sim;

/// Identifier of a database item, in `[0, n_items)`.
pub type ItemId = u32;
/// Identifier of a broadcast channel.
pub type ChannelId = u32;
/// Dissemination cycle number. Cycle 1 is the first broadcast cycle; cycle 0
/// stands for the initial database load.
pub type Cycle = u64;
/// Simulated time in slots. One slot carries one word on each channel.
pub type Tick = u64;
/// Transaction identifier, unique within a run.
pub type TxnId = u64;
/// Wireless client identifier.
pub type ClientId = u32;

pub use model::{
    build_cycle_frame, check_consistency, locate_item, ConsistencyReport, CycleFrame, DataItem,
    FrameLayout, IndexEntry, MobileTransaction, MtState, Observation,
};
pub use protocols::ProtocolId;
pub use sim::{run, MetricsRecord, RunOutput, SimConfig};
