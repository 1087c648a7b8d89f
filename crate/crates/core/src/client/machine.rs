//! The recovery state machine, as a pure transition function.
//!
//! Three stages: fault detection (connection errors, prolonged silence,
//! missed heartbeat acks) moves a registered client to Draining; cleanup
//! closes the stale connection and parks unsent messages back in the send
//! queue, landing in Disconnected; after the backoff window the machine
//! re-enters Connecting, re-sends identity plus every desired subscription,
//! and only a broker ack completes re-registration.
//!
//! The function is total over the event alphabet: events that make no sense
//! in a state leave the state unchanged, so a late or duplicated signal can
//! never wedge the engine.

/// Connection lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    /// No connection; waiting out the backoff window.
    Disconnected,
    /// Attempting to connect / awaiting the registration ack.
    Connecting,
    /// Handshake complete; traffic flows.
    Registered,
    /// Fault detected; cleanup pending.
    Draining,
}

/// Everything the engine can observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecoveryEvent {
    /// Read, write or connect failed.
    ConnError,
    /// Nothing received for longer than the silence timeout.
    RxSilence,
    /// Several heartbeats went unanswered.
    HeartbeatAckMissing,
    /// Transport connected; registration is being replayed.
    ConnEstablished,
    /// Broker acknowledged the Register frame.
    RegisterAcked,
    /// Cleanup after a fault finished.
    CleanupDone,
    /// The backoff window elapsed.
    BackoffElapsed,
}

/// Next state for `(state, event)`.
pub fn transition(state: ClientState, event: RecoveryEvent) -> ClientState {
    use ClientState::*;
    use RecoveryEvent::*;
    match (state, event) {
        // Fault detection.
        (Registered, ConnError | RxSilence | HeartbeatAckMissing) => Draining,
        (Connecting, ConnError | RxSilence | HeartbeatAckMissing) => Disconnected,
        // Cleanup-and-reconnect.
        (Draining, CleanupDone) => Disconnected,
        (Disconnected, BackoffElapsed) => Connecting,
        // Re-registration.
        (Connecting, ConnEstablished) => Connecting,
        (Connecting, RegisterAcked) => Registered,
        // Everything else is a stale or redundant signal.
        (s, _) => s,
    }
}
