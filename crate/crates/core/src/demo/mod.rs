//! Deterministic closed-loop workflow used for end-to-end validation.
//!
//! Four roles, processes in deployment and threads in tests, talk only
//! through the record region and the bus:
//!
//! - producer: parses a synthetic observation stream, cleans and normalizes
//!   it, maintains a sliding window and writes aggregates into the region
//!   (ingestion-role groups), logging observations and writes for audit;
//! - inference: reads the latest snapshot each cycle and publishes a
//!   command from a pure threshold policy bound to the project config;
//! - executor: consumes commands, drives a simulated plant (with an
//!   injectable failure schedule), publishes start/outcome events, records
//!   everything;
//! - materializer: folds outcome events back into feedback-role groups.
//!
//! Command and event bodies carry no wall-clock fields, so two runs with the
//! same config and failure schedule produce byte-identical sequences; replay
//! re-executes recorded commands and verifies the recorded outcomes.

mod audit;
mod config;
mod executor;
pub(crate) mod inference;
mod producer;
mod replay;
mod run;

pub use audit::{audit_run, AuditReport};
pub use config::{DemoConfig, ProjectConfig};
pub use executor::{execute_command, run_executor, run_materializer, ExecutorStats, Plant};
pub use inference::{infer, run_inference, InferenceInput, InferenceStats};
pub use producer::{
    aggregate, normalize, parse_observation, run_producer, synthetic_observations, Aggregates,
    ProducerStats, WindowState,
};
pub use replay::{load_run, replay_run, verify_against, ReplayOutcome, RunTrace, TraceItem};
pub use run::{prepare_run, run_in_process, supervise};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("record store: {0}")]
    Record(#[from] crate::record::RecordError),
    #[error("client: {0}")]
    Client(#[from] crate::client::ClientError),
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("payload: {0}")]
    Payload(#[from] serde_json::Error),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error("replay diverged at cycle {cycle}: {detail}")]
    ReplayDiverged { cycle: u64, detail: String },
    #[error("{0}")]
    Other(String),
}

/// Action a command asks the executor to take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Increase,
    Decrease,
    Hold,
}

/// Command payload. `issued_at` is the inference cycle index, not a wall
/// clock, so bodies compare byte-for-byte across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMsg {
    pub project_id: String,
    pub action: Action,
    pub magnitude: f64,
    pub issued_at: u64,
    /// Set when the snapshot had no data yet and the policy held.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Started,
    Success,
    Failure,
}

/// Event payload published by the executor; `ref_command` is the command
/// envelope's bus sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMsg {
    pub project_id: String,
    pub ref_command: u64,
    pub status: EventStatus,
    pub measured: f64,
}

impl CommandMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("command serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Result<CommandMsg, serde_json::Error> {
        serde_json::from_slice(b)
    }
}

impl EventMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("event serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Result<EventMsg, serde_json::Error> {
        serde_json::from_slice(b)
    }
}

/// Log body for a recorded command: the envelope identity plus the payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub publisher: String,
    pub seq: u64,
    pub command: CommandMsg,
}

/// Log body for a recorded event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub publisher: String,
    pub seq: u64,
    pub event: EventMsg,
}

/// Record-write log bodies emitted by the producer, used by the aggregate
/// audit (observations in, aggregate writes out).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProducerLogBody {
    Observation { value: f64 },
    ObservationSkipped { raw: String },
    AggregateWrite { mean: f64, min: f64, max: f64, count: u64 },
}

/// Group names used in the demo region for a project.
pub fn group_names(project_id: &str) -> DemoGroups {
    DemoGroups {
        obs_agg: format!("{project_id}_agg"),
        fb_value: format!("{project_id}_fb"),
        fb_progress: format!("{project_id}_fbseen"),
    }
}

pub struct DemoGroups {
    /// f64[4]: mean, min, max, count — ingestion-owned.
    pub obs_agg: String,
    /// f64[2]: plant value, success count — feedback-owned, Success only.
    pub fb_value: String,
    /// i64[2]: outcome events seen, last referenced command seq —
    /// feedback-owned, every outcome.
    pub fb_progress: String,
}

/// Region schema for one demo project.
pub fn demo_schema(project_id: &str) -> crate::record::RecordSchema {
    use crate::record::{FieldGroup, RecordSchema, WriterRole};
    let g = group_names(project_id);
    RecordSchema::new(vec![
        FieldGroup::f64(&g.obs_agg, 4, WriterRole::Ingestion),
        FieldGroup::f64(&g.fb_value, 2, WriterRole::Feedback),
        FieldGroup::i64(&g.fb_progress, 2, WriterRole::Feedback),
    ])
}
