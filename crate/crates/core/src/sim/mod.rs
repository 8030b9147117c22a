//! Discrete-event engine, metrics, trace log and correctness oracles.

mod config;
mod engine;
mod metrics;
pub mod oracle;
mod trace;

pub use config::{ArrivalMode, ConfigError, SimConfig};
pub use engine::{run, RunOutput, SimError, World};
pub use metrics::{CycleSample, MetricsRecord, Summary};
pub use trace::{to_jsonl, TraceEvent, TraceRecord};
