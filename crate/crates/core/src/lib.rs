//! ANCHOR runtime: a many-to-many publish/subscribe bus with priority-aware
//! delivery, a memory-mapped canonical record store, and the closed-loop
//! tooling built on top of both (demo workflow, benchmark harness, CLI).
//!
//! The crate is organized by subsystem:
//!
//! - [`wire`]: topic grammar and the binary frame codec spoken by every role.
//! - [`record`]: memory-mapped record regions and the append-only replay log.
//! - [`broker`]: the per-cluster master that routes, batches and expires.
//! - [`client`]: the node-side SDK with automatic crash recovery.
//! - [`gateway`]: cross-cluster bridging with loop suppression.
//! - [`demo`]: a deterministic closed-loop workflow (ingest, infer, execute,
//!   materialize) used for end-to-end validation and replay.
//! - [`bench`]: latency-distribution and crash-recovery measurement harness.

pub mod bench;
pub mod broker;
pub mod client;
pub mod clock;
pub mod config;
pub mod demo;
pub mod gateway;
pub mod record;
pub mod transport;
pub mod wire;
