//! Node-side SDK: connect/register, non-blocking publish over an
//! asynchronous send queue, subscriptions with callback dispatch, heartbeats,
//! and automatic recovery after broker crashes.
//!
//! One control thread owns the connection lifecycle and the recovery state
//! machine; a writer thread drains the send queue; each connection gets a
//! reader thread; handlers run in order on a single dispatch thread. The
//! client handle is safe to use from any thread; publish never touches the
//! network on the caller's thread.

mod backoff;
mod machine;

pub use backoff::BackoffConfig;
pub use machine::{transition, ClientState, RecoveryEvent};

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::clock::mono_ns;
use crate::transport::{Endpoint, Stream};
use crate::wire::{
    encode_frame, AckStatus, DeliveryScope, Frame, FrameReader, MessageEnvelope, RegionFilter,
    Subscription, TopicAddress, WireLimits, PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("payload of {size} bytes exceeds max_payload {max}")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("invalid subscription pattern {0:?}")]
    PatternInvalid(String),
    #[error("invalid topic: {0}")]
    BadTopic(#[from] crate::wire::WireError),
}

/// What happened to a published message locally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PublishOutcome {
    /// Queued for asynchronous sending.
    Accepted,
    /// Queued, but the queue was full and its oldest message was evicted.
    DroppedLocal,
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub endpoint: Endpoint,
    pub identity: String,
    /// Envelopes retained while the broker is unreachable (drop-oldest).
    pub send_queue_capacity: usize,
    /// Envelopes buffered between the reader and the dispatch thread.
    pub dispatch_capacity: usize,
    pub backoff: BackoffConfig,
    pub heartbeat_interval: Duration,
    pub heartbeat_timeout: Duration,
    pub connect_timeout: Duration,
    pub limits: WireLimits,
}

impl ClientOptions {
    pub fn new(endpoint: Endpoint, identity: &str) -> ClientOptions {
        ClientOptions {
            endpoint,
            identity: identity.to_string(),
            send_queue_capacity: 8192,
            dispatch_capacity: 8192,
            backoff: BackoffConfig::default(),
            heartbeat_interval: Duration::from_millis(500),
            heartbeat_timeout: Duration::from_millis(1500),
            connect_timeout: Duration::from_millis(1000),
            limits: WireLimits::default(),
        }
    }

    /// Applies `ANCHOR_ENDPOINT` / `ANCHOR_NODE_ID` environment overrides.
    pub fn from_env(endpoint: &str, identity: &str) -> std::io::Result<ClientOptions> {
        let ep = std::env::var("ANCHOR_ENDPOINT").unwrap_or_else(|_| endpoint.to_string());
        let id = std::env::var("ANCHOR_NODE_ID").unwrap_or_else(|_| identity.to_string());
        Ok(ClientOptions::new(Endpoint::parse(&ep)?, &id))
    }

    /// Silence threshold that counts as a fault: twice the heartbeat timeout.
    pub fn silence_timeout(&self) -> Duration {
        self.heartbeat_timeout * 2
    }
}

/// Heartbeats that may go unanswered before the client declares a fault.
const MAX_UNACKED_HEARTBEATS: u32 = 3;
/// Envelopes drained from the send queue per write.
const WRITE_BATCH: usize = 64;

/// Options for one subscription.
#[derive(Debug, Clone)]
pub struct SubscribeOptions {
    pub region_filter: RegionFilter,
    pub scope: DeliveryScope,
    pub allow_self: bool,
}

impl Default for SubscribeOptions {
    fn default() -> Self {
        SubscribeOptions {
            region_filter: RegionFilter::Any,
            scope: DeliveryScope::Standard,
            allow_self: false,
        }
    }
}

pub type Handler = Arc<dyn Fn(&MessageEnvelope) + Send + Sync + 'static>;

struct SubEntry {
    sub: Subscription,
    handler: Handler,
}

#[derive(Default)]
struct SendQueue {
    q: VecDeque<MessageEnvelope>,
    dropped_local: u64,
}

struct StateCell {
    state: ClientState,
    failures: u32,
    conn: Option<Stream>,
    conn_gen: u64,
    register_acked: bool,
    fault: Option<RecoveryEvent>,
}

#[derive(Default)]
pub struct ClientCounters {
    pub published: AtomicU64,
    pub sent: AtomicU64,
    pub handler_invocations: AtomicU64,
    pub dispatch_overflow: AtomicU64,
    pub registrations: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct ClientStatus {
    pub state: ClientState,
    pub consecutive_failures: u32,
    pub queued: usize,
    pub dropped_local: u64,
    pub published: u64,
    pub sent: u64,
    pub registrations: u64,
    pub last_rx_age: Option<Duration>,
}

struct Inner {
    opts: ClientOptions,
    state: Mutex<StateCell>,
    state_cv: Condvar,
    state_mirror: AtomicU8,
    sendq: Mutex<SendQueue>,
    sendq_cv: Condvar,
    controlq: Mutex<VecDeque<Frame>>,
    subs: Mutex<BTreeMap<u64, SubEntry>>,
    next_sub_id: AtomicU64,
    seqs: Mutex<HashMap<String, u64>>,
    last_rx_ns: AtomicU64,
    unacked_heartbeats: AtomicU32,
    shutdown: AtomicBool,
    /// Envelopes popped from the queue but not yet written or pushed back.
    in_flight: AtomicU64,
    dispatch_tx: Sender<MessageEnvelope>,
    counters: ClientCounters,
    /// (attempt instant, failures at that attempt); the no-flapping audit
    /// checks consecutive gaps against the backoff lower bound.
    attempts: Mutex<Vec<(Instant, u32)>>,
}

const MIRROR_DISCONNECTED: u8 = 0;
const MIRROR_CONNECTING: u8 = 1;
const MIRROR_REGISTERED: u8 = 2;
const MIRROR_DRAINING: u8 = 3;

fn mirror_of(s: ClientState) -> u8 {
    match s {
        ClientState::Disconnected => MIRROR_DISCONNECTED,
        ClientState::Connecting => MIRROR_CONNECTING,
        ClientState::Registered => MIRROR_REGISTERED,
        ClientState::Draining => MIRROR_DRAINING,
    }
}

/// Handle to a running client. Share it behind the returned `Arc`; an
/// explicit [`Client::shutdown`] (or the final drop) stops the threads.
pub struct Client {
    inner: Arc<Inner>,
    threads: Mutex<Vec<std::thread::JoinHandle<()>>>,
}

impl Client {
    /// Starts the client. Connecting is lazy and never fails synchronously:
    /// a down broker just parks the machine in its reconnect loop.
    pub fn connect(opts: ClientOptions) -> Arc<Client> {
        let (dispatch_tx, dispatch_rx) = bounded(opts.dispatch_capacity);
        let inner = Arc::new(Inner {
            opts,
            state: Mutex::new(StateCell {
                state: ClientState::Disconnected,
                failures: 0,
                conn: None,
                conn_gen: 0,
                register_acked: false,
                fault: None,
            }),
            state_cv: Condvar::new(),
            state_mirror: AtomicU8::new(MIRROR_DISCONNECTED),
            sendq: Mutex::new(SendQueue::default()),
            sendq_cv: Condvar::new(),
            controlq: Mutex::new(VecDeque::new()),
            subs: Mutex::new(BTreeMap::new()),
            next_sub_id: AtomicU64::new(1),
            seqs: Mutex::new(HashMap::new()),
            last_rx_ns: AtomicU64::new(0),
            unacked_heartbeats: AtomicU32::new(0),
            shutdown: AtomicBool::new(false),
            in_flight: AtomicU64::new(0),
            dispatch_tx,
            counters: ClientCounters::default(),
            attempts: Mutex::new(Vec::new()),
        });

        let mut threads = Vec::new();
        {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name(format!("anchor-client-ctl-{}", inner.opts.identity))
                    .spawn(move || control_loop(inner))
                    .expect("spawn control thread"),
            );
        }
        {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name(format!("anchor-client-tx-{}", inner.opts.identity))
                    .spawn(move || writer_loop(inner))
                    .expect("spawn writer thread"),
            );
        }
        {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name(format!("anchor-client-dispatch-{}", inner.opts.identity))
                    .spawn(move || dispatch_loop(inner, dispatch_rx))
                    .expect("spawn dispatch thread"),
            );
        }
        Arc::new(Client {
            inner,
            threads: Mutex::new(threads),
        })
    }

    pub fn identity(&self) -> &str {
        &self.inner.opts.identity
    }

    pub fn options(&self) -> &ClientOptions {
        &self.inner.opts
    }

    /// Stamps sequence and timestamp, queues the envelope, returns without
    /// touching the network. A full queue evicts its oldest entry.
    pub fn publish(
        &self,
        topic: &TopicAddress,
        payload: &[u8],
    ) -> Result<PublishOutcome, ClientError> {
        topic.validate()?;
        if payload.len() > self.inner.opts.limits.max_payload {
            return Err(ClientError::PayloadTooLarge {
                size: payload.len(),
                max: self.inner.opts.limits.max_payload,
            });
        }
        let seq = {
            let mut seqs = self.inner.seqs.lock();
            let c = seqs.entry(topic.channel.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let env = MessageEnvelope {
            topic: topic.clone(),
            publisher_id: self.inner.opts.identity.clone(),
            seq,
            ts_monotonic_ns: mono_ns(),
            hop_count: 0,
            payload: payload.to_vec(),
        };
        Ok(self.enqueue_envelope(env))
    }

    /// Queues a pre-built envelope without restamping identity, sequence or
    /// hop count. Gateways use this to preserve origin across clusters.
    pub fn publish_envelope(&self, env: MessageEnvelope) -> Result<PublishOutcome, ClientError> {
        env.topic.validate()?;
        if env.payload.len() > self.inner.opts.limits.max_payload {
            return Err(ClientError::PayloadTooLarge {
                size: env.payload.len(),
                max: self.inner.opts.limits.max_payload,
            });
        }
        Ok(self.enqueue_envelope(env))
    }

    fn enqueue_envelope(&self, env: MessageEnvelope) -> PublishOutcome {
        self.inner.counters.published.fetch_add(1, Ordering::Relaxed);
        let outcome = {
            let mut q = self.inner.sendq.lock();
            let mut outcome = PublishOutcome::Accepted;
            if q.q.len() >= self.inner.opts.send_queue_capacity {
                q.q.pop_front();
                q.dropped_local += 1;
                outcome = PublishOutcome::DroppedLocal;
            }
            q.q.push_back(env);
            outcome
        };
        self.inner.sendq_cv.notify_all();
        outcome
    }

    /// Registers interest and a handler. The subscription is part of the
    /// client's desired state: it survives reconnects and is replayed to the
    /// broker on every registration.
    pub fn subscribe(
        &self,
        channel_pattern: &str,
        opts: SubscribeOptions,
        handler: impl Fn(&MessageEnvelope) + Send + Sync + 'static,
    ) -> Result<u64, ClientError> {
        let id = self.inner.next_sub_id.fetch_add(1, Ordering::Relaxed);
        let sub = Subscription {
            subscription_id: id,
            channel_pattern: channel_pattern.to_string(),
            region_filter: opts.region_filter,
            scope: opts.scope,
            allow_self: opts.allow_self,
        };
        if !sub.pattern_is_valid() {
            return Err(ClientError::PatternInvalid(channel_pattern.to_string()));
        }
        self.inner.subs.lock().insert(
            id,
            SubEntry {
                sub: sub.clone(),
                handler: Arc::new(handler),
            },
        );
        // Also queue a live Subscribe when a connection exists or is being
        // set up: the handshake snapshot may already have been built without
        // this entry. Duplicates are idempotent broker-side.
        let mirror = self.inner.state_mirror.load(Ordering::SeqCst);
        if mirror == MIRROR_REGISTERED || mirror == MIRROR_CONNECTING {
            self.inner.controlq.lock().push_back(Frame::Subscribe(sub));
            self.inner.sendq_cv.notify_all();
        }
        Ok(id)
    }

    /// Removes the subscription locally (handler stops immediately) and on
    /// the broker.
    pub fn unsubscribe(&self, subscription_id: u64) {
        let existed = self.inner.subs.lock().remove(&subscription_id).is_some();
        let mirror = self.inner.state_mirror.load(Ordering::SeqCst);
        if existed && (mirror == MIRROR_REGISTERED || mirror == MIRROR_CONNECTING) {
            self.inner
                .controlq
                .lock()
                .push_back(Frame::Unsubscribe { subscription_id });
            self.inner.sendq_cv.notify_all();
        }
    }

    /// Desired subscriptions (the reconnect-surviving source of truth).
    pub fn desired_subscriptions(&self) -> Vec<Subscription> {
        self.inner.subs.lock().values().map(|e| e.sub.clone()).collect()
    }

    pub fn status(&self) -> ClientStatus {
        let st = self.inner.state.lock();
        let q = self.inner.sendq.lock();
        let last_rx = self.inner.last_rx_ns.load(Ordering::Relaxed);
        ClientStatus {
            state: st.state,
            consecutive_failures: st.failures,
            queued: q.q.len(),
            dropped_local: q.dropped_local,
            published: self.inner.counters.published.load(Ordering::Relaxed),
            sent: self.inner.counters.sent.load(Ordering::Relaxed),
            registrations: self.inner.counters.registrations.load(Ordering::Relaxed),
            last_rx_age: if last_rx == 0 {
                None
            } else {
                Some(Duration::from_nanos(mono_ns().saturating_sub(last_rx)))
            },
        }
    }

    /// Blocks until the client reaches Registered or the timeout elapses.
    pub fn wait_registered(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        while st.state != ClientState::Registered {
            let now = Instant::now();
            if now >= deadline || self.inner.shutdown.load(Ordering::SeqCst) {
                return false;
            }
            self.inner.state_cv.wait_for(&mut st, deadline - now);
        }
        true
    }

    /// Blocks until the send queue is empty (everything handed to the wire)
    /// or the timeout elapses.
    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.inner.sendq.lock().q.is_empty()
                && self.inner.in_flight.load(Ordering::SeqCst) == 0
            {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    /// Connection attempt history: (instant, failure count before the
    /// attempt). The no-flapping property test audits the gaps.
    pub fn attempt_history(&self) -> Vec<(Instant, u32)> {
        self.inner.attempts.lock().clone()
    }

    pub fn shutdown(&self) {
        if self.inner.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        {
            let st = self.inner.state.lock();
            if let Some(conn) = &st.conn {
                conn.shutdown();
            }
        }
        self.inner.state_cv.notify_all();
        self.inner.sendq_cv.notify_all();
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Inner {
    fn set_state(&self, cell: &mut StateCell, next: ClientState) {
        if cell.state != next {
            log::debug!(
                "client {}: {:?} -> {next:?} (failures={})",
                self.opts.identity,
                cell.state,
                cell.failures
            );
        }
        cell.state = next;
        self.state_mirror.store(mirror_of(next), Ordering::SeqCst);
        self.state_cv.notify_all();
        self.sendq_cv.notify_all();
    }

    /// Reader/writer threads report connection faults here; the control
    /// thread consumes them.
    fn raise_fault(&self, gen: u64, event: RecoveryEvent) {
        let mut st = self.state.lock();
        if st.conn_gen != gen {
            return; // stale connection
        }
        if st.fault.is_none() {
            st.fault = Some(event);
        }
        self.state_cv.notify_all();
    }

    fn rx_seen(&self) {
        self.last_rx_ns.store(mono_ns(), Ordering::Relaxed);
        self.unacked_heartbeats.store(0, Ordering::Relaxed);
    }
}

// ---------------------------------------------------------------------------
// Control thread: the recovery engine
// ---------------------------------------------------------------------------

fn control_loop(inner: Arc<Inner>) {
    let mut rng = rand::thread_rng();
    while !inner.shutdown.load(Ordering::SeqCst) {
        let state = inner.state.lock().state;
        match state {
            ClientState::Disconnected => {
                let failures = inner.state.lock().failures;
                let delay = inner.opts.backoff.delay(failures, &mut rng);
                if !delay.is_zero() {
                    let deadline = Instant::now() + delay;
                    let mut st = inner.state.lock();
                    while Instant::now() < deadline && !inner.shutdown.load(Ordering::SeqCst) {
                        inner
                            .state_cv
                            .wait_for(&mut st, deadline.saturating_duration_since(Instant::now()));
                    }
                }
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let mut st = inner.state.lock();
                let next = machine::transition(st.state, RecoveryEvent::BackoffElapsed);
                inner.set_state(&mut st, next);
            }
            ClientState::Connecting => {
                let failures = inner.state.lock().failures;
                inner.attempts.lock().push((Instant::now(), failures));
                match try_register(&inner) {
                    Ok(()) => {
                        let mut st = inner.state.lock();
                        st.failures = 0;
                        st.fault = None;
                        inner.counters.registrations.fetch_add(1, Ordering::Relaxed);
                        let next = machine::transition(st.state, RecoveryEvent::RegisterAcked);
                        inner.set_state(&mut st, next);
                        inner.rx_seen();
                    }
                    Err(e) => {
                        log::debug!("client {}: connect failed: {e}", inner.opts.identity);
                        let mut st = inner.state.lock();
                        if let Some(conn) = st.conn.take() {
                            conn.shutdown();
                        }
                        st.conn_gen += 1;
                        st.failures += 1;
                        st.fault = None;
                        let next = machine::transition(st.state, RecoveryEvent::ConnError);
                        inner.set_state(&mut st, next);
                    }
                }
            }
            ClientState::Registered => {
                // Monitor for faults, silence and unanswered heartbeats.
                let silence = inner.opts.silence_timeout();
                let mut fault: Option<RecoveryEvent> = None;
                {
                    let mut st = inner.state.lock();
                    if st.fault.is_none() {
                        inner
                            .state_cv
                            .wait_for(&mut st, inner.opts.heartbeat_interval / 2);
                    }
                    if let Some(ev) = st.fault.take() {
                        fault = Some(ev);
                    }
                }
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                if fault.is_none() {
                    let last = inner.last_rx_ns.load(Ordering::Relaxed);
                    let silent_for = Duration::from_nanos(mono_ns().saturating_sub(last));
                    if last != 0 && silent_for > silence {
                        fault = Some(RecoveryEvent::RxSilence);
                    } else if inner.unacked_heartbeats.load(Ordering::Relaxed)
                        >= MAX_UNACKED_HEARTBEATS
                    {
                        fault = Some(RecoveryEvent::HeartbeatAckMissing);
                    }
                }
                if let Some(ev) = fault {
                    log::info!(
                        "client {}: fault {ev:?}, entering recovery",
                        inner.opts.identity
                    );
                    let mut st = inner.state.lock();
                    let next = machine::transition(st.state, ev);
                    inner.set_state(&mut st, next);
                }
            }
            ClientState::Draining => {
                // Cleanup: close the stale connection and cancel in-flight
                // sends. The writer already parked unsent envelopes back in
                // the queue; anything the kernel accepted is lost, which is
                // within at-most-once semantics.
                let mut st = inner.state.lock();
                if let Some(conn) = st.conn.take() {
                    conn.shutdown();
                }
                st.conn_gen += 1;
                st.failures = st.failures.max(1);
                st.fault = None;
                st.register_acked = false;
                let next = machine::transition(st.state, RecoveryEvent::CleanupDone);
                inner.set_state(&mut st, next);
            }
        }
    }
}

/// Connect, register, replay every desired subscription, await the ack.
fn try_register(inner: &Arc<Inner>) -> std::io::Result<()> {
    let conn = Stream::connect(&inner.opts.endpoint, inner.opts.connect_timeout)?;
    let gen = {
        let mut st = inner.state.lock();
        st.conn_gen += 1;
        st.register_acked = false;
        st.conn = Some(conn.try_clone()?);
        st.conn_gen
    };

    // Reader first, so the ack cannot race past us.
    {
        let inner = Arc::clone(inner);
        let read_half = conn.try_clone()?;
        std::thread::Builder::new()
            .name(format!("anchor-client-rx-{}", inner.opts.identity))
            .spawn(move || reader_loop(inner, read_half, gen))
            .expect("spawn reader thread");
    }

    // ConnEstablished: re-advertise identity and every desired subscription.
    let mut w = conn.try_clone()?;
    // Anything queued for the dead connection is superseded by the full
    // replay below; changes racing this snapshot re-queue themselves because
    // the state mirror already reads Connecting.
    inner.controlq.lock().clear();
    let mut handshake = Vec::new();
    handshake.extend_from_slice(
        &encode_frame(
            &Frame::Register {
                identity: inner.opts.identity.clone(),
                protocol_version: PROTOCOL_VERSION,
            },
            &inner.opts.limits,
        )
        .expect("register frame encodes"),
    );
    {
        let subs = inner.subs.lock();
        for entry in subs.values() {
            handshake.extend_from_slice(
                &encode_frame(&Frame::Subscribe(entry.sub.clone()), &inner.opts.limits)
                    .expect("subscribe frame encodes"),
            );
        }
    }
    w.write_all(&handshake)?;

    // Await RegisterAcked (the reader flips the flag).
    let deadline = Instant::now() + inner.opts.heartbeat_timeout;
    let mut st = inner.state.lock();
    loop {
        if st.register_acked {
            return Ok(());
        }
        if st.fault.is_some() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::ConnectionReset,
                "connection failed during registration",
            ));
        }
        let now = Instant::now();
        if now >= deadline || inner.shutdown.load(Ordering::SeqCst) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::TimedOut,
                "no registration ack",
            ));
        }
        inner.state_cv.wait_for(&mut st, deadline - now);
    }
}

// ---------------------------------------------------------------------------
// Reader thread (one per connection)
// ---------------------------------------------------------------------------

fn reader_loop(inner: Arc<Inner>, conn: Stream, gen: u64) {
    let mut reader = FrameReader::new(conn, inner.opts.limits);
    loop {
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let frame = match reader.next_frame() {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => {
                inner.raise_fault(gen, RecoveryEvent::ConnError);
                return;
            }
        };
        inner.rx_seen();
        match frame {
            Frame::Ack { ref_seq: 0, status } => {
                let mut st = inner.state.lock();
                if st.conn_gen == gen {
                    match status {
                        AckStatus::Ok => {
                            st.register_acked = true;
                            inner.state_cv.notify_all();
                        }
                        other => {
                            log::warn!(
                                "client {}: registration rejected: {other:?}",
                                inner.opts.identity
                            );
                            drop(st);
                            inner.raise_fault(gen, RecoveryEvent::ConnError);
                            return;
                        }
                    }
                }
            }
            Frame::Ack { ref_seq, status } => {
                if status != AckStatus::Ok {
                    log::warn!(
                        "client {}: subscription {ref_seq} rejected: {status:?}",
                        inner.opts.identity
                    );
                }
            }
            Frame::Heartbeat { .. } => {} // echo; rx_seen already reset the counters
            Frame::Data(env) => deliver(&inner, env),
            Frame::Batch(envs) => {
                for env in envs {
                    deliver(&inner, env);
                }
            }
            Frame::Register { .. } | Frame::Subscribe(_) | Frame::Unsubscribe { .. } => {}
        }
    }
}

fn deliver(inner: &Arc<Inner>, env: MessageEnvelope) {
    match inner.dispatch_tx.try_send(env) {
        Ok(()) => {}
        Err(TrySendError::Full(_)) => {
            inner
                .counters
                .dispatch_overflow
                .fetch_add(1, Ordering::Relaxed);
        }
        Err(TrySendError::Disconnected(_)) => {}
    }
}

// ---------------------------------------------------------------------------
// Dispatch thread: handlers run here, sequentially, in order
// ---------------------------------------------------------------------------

fn dispatch_loop(inner: Arc<Inner>, rx: Receiver<MessageEnvelope>) {
    loop {
        match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(env) => {
                let handlers: Vec<Handler> = {
                    let subs = inner.subs.lock();
                    subs.values()
                        .filter(|e| e.sub.matches(&env, &inner.opts.identity))
                        .map(|e| Arc::clone(&e.handler))
                        .collect()
                };
                for h in handlers {
                    inner
                        .counters
                        .handler_invocations
                        .fetch_add(1, Ordering::Relaxed);
                    h(&env);
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
        }
    }
}

// ---------------------------------------------------------------------------
// Writer thread: control frames, heartbeats, then data
// ---------------------------------------------------------------------------

fn writer_loop(inner: Arc<Inner>) {
    let mut next_heartbeat = Instant::now();
    loop {
        // Wait until registered with something to do (or a heartbeat due).
        {
            let mut q = inner.sendq.lock();
            loop {
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let registered = inner.state_mirror.load(Ordering::SeqCst) == MIRROR_REGISTERED;
                if registered {
                    let has_work = !q.q.is_empty()
                        || !inner.controlq.lock().is_empty()
                        || Instant::now() >= next_heartbeat;
                    if has_work {
                        break;
                    }
                }
                let wait = if registered {
                    next_heartbeat
                        .saturating_duration_since(Instant::now())
                        .min(Duration::from_millis(100))
                        .max(Duration::from_millis(1))
                } else {
                    Duration::from_millis(100)
                };
                inner.sendq_cv.wait_for(&mut q, wait);
            }
        }

        let (conn, gen) = {
            let st = inner.state.lock();
            match (&st.conn, st.state) {
                (Some(c), ClientState::Registered) => match c.try_clone() {
                    Ok(c) => (c, st.conn_gen),
                    Err(_) => continue,
                },
                _ => continue,
            }
        };
        let mut w = conn;

        // Control frames first: subscription changes must not starve behind
        // a data backlog.
        let controls: Vec<Frame> = inner.controlq.lock().drain(..).collect();
        let mut failed = false;
        for f in &controls {
            if let Ok(bytes) = encode_frame(f, &inner.opts.limits) {
                if w.write_all(&bytes).is_err() {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            let mut cq = inner.controlq.lock();
            for f in controls.into_iter().rev() {
                cq.push_front(f);
            }
            drop(cq);
            inner.raise_fault(gen, RecoveryEvent::ConnError);
            continue;
        }

        if Instant::now() >= next_heartbeat {
            next_heartbeat = Instant::now() + inner.opts.heartbeat_interval;
            let hb = Frame::Heartbeat {
                sender_id: inner.opts.identity.clone(),
                ts_monotonic_ns: mono_ns(),
            };
            if let Ok(bytes) = encode_frame(&hb, &inner.opts.limits) {
                if w.write_all(&bytes).is_err() {
                    inner.raise_fault(gen, RecoveryEvent::ConnError);
                    continue;
                }
                inner.unacked_heartbeats.fetch_add(1, Ordering::Relaxed);
            }
        }

        // Data: drain a bounded slice of the queue, encode, send. On failure
        // the slice goes back to the front so nothing is lost locally.
        let batch: Vec<MessageEnvelope> = {
            let mut q = inner.sendq.lock();
            let n = q.q.len().min(WRITE_BATCH);
            let b: Vec<MessageEnvelope> = q.q.drain(..n).collect();
            // Marked in-flight under the queue lock so wait_drained never
            // observes an empty queue while a batch is mid-write.
            inner.in_flight.store(b.len() as u64, Ordering::SeqCst);
            b
        };
        if batch.is_empty() {
            continue;
        }
        let frame = if batch.len() == 1 {
            Frame::Data(batch[0].clone())
        } else {
            Frame::Batch(batch.clone())
        };
        let ok = match encode_frame(&frame, &inner.opts.limits) {
            Ok(bytes) => w.write_all(&bytes).is_ok(),
            Err(_) => {
                // Oversized batch: fall back to one frame per envelope.
                let mut all_ok = true;
                for env in &batch {
                    match encode_frame(&Frame::Data(env.clone()), &inner.opts.limits) {
                        Ok(bytes) => {
                            if w.write_all(&bytes).is_err() {
                                all_ok = false;
                                break;
                            }
                        }
                        Err(e) => {
                            log::warn!(
                                "client {}: dropping unencodable envelope: {e}",
                                inner.opts.identity
                            );
                        }
                    }
                }
                all_ok
            }
        };
        if ok {
            inner
                .counters
                .sent
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            inner.in_flight.store(0, Ordering::SeqCst);
        } else {
            let mut q = inner.sendq.lock();
            for env in batch.into_iter().rev() {
                q.q.push_front(env);
            }
            inner.in_flight.store(0, Ordering::SeqCst);
            drop(q);
            inner.raise_fault(gen, RecoveryEvent::ConnError);
        }
    }
}
