//! Canonical record store: a memory-mapped region of typed field-group
//! arrays shared across processes, plus an append-only replay log.
//!
//! The region gives readers torn-free snapshots without blocking writers:
//! each field group is guarded by its own sequence counter (odd while a
//! write is in flight) and the region header carries a global counter
//! bracketing every write, so multi-group snapshots can be validated as a
//! unit. Write access is segregated by role so ingestion and feedback paths
//! cannot stomp on each other's groups. File layouts are documented in
//! `docs/records.md`.

mod log;
mod region;

pub use log::{replay_log, EntryKind, ReplayLogEntry, ReplayLogWriter, ReplayResult};
pub use region::{
    ElementType, FieldGroup, GroupValues, HandleRole, RecordSchema, Region, Snapshot, WriterRole,
    DATA_START, DEFAULT_SNAPSHOT_RETRIES, MAX_GROUPS, REGION_MAGIC,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid schema: {0}")]
    SchemaInvalid(String),
    #[error("bad region magic")]
    BadMagic,
    #[error("unsupported region format version {0}")]
    VersionUnsupported(u32),
    #[error("handle role {handle:?} cannot write group {group:?} owned by {owner:?}")]
    RoleViolation {
        group: String,
        handle: String,
        owner: String,
    },
    #[error("group {group:?}: {reason}")]
    ArityMismatch { group: String, reason: String },
    #[error("unknown group {0:?}")]
    UnknownGroup(String),
    #[error("snapshot contended: counter never stabilized within {retries} retries")]
    ContendedTimeout { retries: usize },
    #[error("group name {0:?} already exists")]
    NameCollision(String),
    #[error("schema is full ({max} groups)")]
    SchemaFull { max: usize },
    #[error("corrupt replay log: {0}")]
    LogCorrupt(String),
}
