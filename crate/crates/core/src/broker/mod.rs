//! The cluster master: accepts node connections, maintains sessions and
//! subscriptions, routes and fans out published messages, batches under a
//! residence-time bound, and expires silent nodes.
//!
//! Delivery is at-most-once: bounded queues drop the oldest message of the
//! same priority under overload, nothing is persisted, and a crashed broker
//! comes back empty — clients are responsible for re-registering (which the
//! SDK does automatically).

mod core;
mod session;
pub mod testkit;

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::clock::mono_ns;
use crate::record::{FieldGroup, GroupValues, RecordSchema, Region, WriterRole};
use crate::transport::{Endpoint, Listener, Stream};
use crate::wire::{
    encode_frame, AckStatus, Frame, FrameReader, MessageEnvelope, Region as TopicRegion,
    TopicAddress, WireLimits, PROTOCOL_VERSION,
};

pub(crate) use self::core::Core;
pub(crate) use self::session::ChannelSink;
pub use self::session::{Session, SessionStats};

/// Channel a node publishes on (any payload) to request a stats dump; the
/// broker answers with a directed message on [`STATS_CHANNEL`].
pub const STATS_REQUEST_CHANNEL: &str = "_statsreq";
/// Channel carrying broker stats dumps (JSON payload, directed delivery).
pub const STATS_CHANNEL: &str = "_stats";
/// Publisher identity the broker uses for synthesized messages.
pub const BROKER_IDENTITY: &str = "_broker";

/// Per-message send-path measurements, enabled through
/// [`BrokerConfig::instrumentation`]. The residence-bound tests read these.
#[derive(Default)]
pub struct SendInstrumentation {
    pub records: Mutex<Vec<SendRecord>>,
}

#[derive(Debug, Clone)]
pub struct SendRecord {
    pub publisher: String,
    pub seq: u64,
    pub prio: u8,
    /// When the message entered the session queue.
    pub enqueue_ns: u64,
    /// When the frame carrying it was handed to the asynchronous sender.
    pub send_initiated_ns: u64,
    /// Number of messages sharing that frame.
    pub batched_with: usize,
}

#[derive(Clone)]
pub struct BrokerConfig {
    /// Capacity of each of the eight per-priority session queues.
    pub queue_capacity: usize,
    /// Accumulated wire bytes that force a flush regardless of residence.
    pub batch_bytes_threshold: usize,
    /// Longest a message may wait in the batch path before a send is forced.
    pub max_residence: Duration,
    /// Driver period; clamped to `max_residence / 4`.
    pub tick: Duration,
    /// Silence after which a session is expired. Any frame refreshes it.
    pub heartbeat_timeout: Duration,
    /// How often the driver sweeps for expired sessions.
    pub liveness_every: Duration,
    /// Frames the per-session sender buffers before backpressure.
    pub send_channel_frames: usize,
    pub limits: WireLimits,
    /// Optional on-disk state region (operational counters). The recovery
    /// experiment deletes this file together with the process to emulate a
    /// cold restart with shared-memory loss.
    pub state_region: Option<PathBuf>,
    pub instrumentation: Option<Arc<SendInstrumentation>>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        let max_residence = Duration::from_millis(1);
        BrokerConfig {
            queue_capacity: 4096,
            batch_bytes_threshold: 64 * 1024,
            max_residence,
            tick: max_residence / 4,
            heartbeat_timeout: Duration::from_millis(1500),
            liveness_every: Duration::from_millis(100),
            send_channel_frames: 128,
            limits: WireLimits::default(),
            state_region: None,
            instrumentation: None,
        }
    }
}

impl BrokerConfig {
    pub fn effective_tick(&self) -> Duration {
        self.tick
            .min(self.max_residence / 4)
            .max(Duration::from_micros(50))
    }
}

#[derive(Default)]
pub struct GlobalStats {
    pub frames_rx: AtomicU64,
    /// Handed-off messages accumulated from sessions that have closed; live
    /// session counters are added on top when stats are dumped.
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
    pub no_route: AtomicU64,
    pub oversize: AtomicU64,
    pub expired_sessions: AtomicU64,
    pub evicted_sessions: AtomicU64,
}

struct BrokerInner {
    config: BrokerConfig,
    core: Mutex<Core>,
    global: GlobalStats,
    shutdown: AtomicBool,
    broker_seq: AtomicU64,
    next_conn_id: AtomicU64,
    open_conns: Mutex<std::collections::HashMap<u64, Stream>>,
    state_writer: Mutex<Option<Region>>,
    started_at: Instant,
}

/// A running broker. Dropping it shuts everything down.
pub struct Broker {
    inner: Arc<BrokerInner>,
    endpoint: Endpoint,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl Broker {
    pub fn start(endpoint: &Endpoint, config: BrokerConfig) -> std::io::Result<Broker> {
        let listener = Listener::bind(endpoint)?;
        let actual = listener.local_endpoint()?;

        let state_writer = match &config.state_region {
            Some(path) => Some(init_state_region(path)?),
            None => None,
        };

        let inner = Arc::new(BrokerInner {
            config,
            core: Mutex::new(Core::new()),
            global: GlobalStats::default(),
            shutdown: AtomicBool::new(false),
            broker_seq: AtomicU64::new(0),
            next_conn_id: AtomicU64::new(1),
            open_conns: Mutex::new(std::collections::HashMap::new()),
            state_writer: Mutex::new(state_writer),
            started_at: Instant::now(),
        });

        let mut threads = Vec::new();
        {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("anchor-broker-accept".into())
                    .spawn(move || accept_loop(inner, listener))
                    .expect("spawn accept loop"),
            );
        }
        {
            let inner = Arc::clone(&inner);
            threads.push(
                std::thread::Builder::new()
                    .name("anchor-broker-driver".into())
                    .spawn(move || driver_loop(inner))
                    .expect("spawn driver loop"),
            );
        }
        log::info!("broker listening on {actual}");
        Ok(Broker {
            inner,
            endpoint: actual,
            threads,
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn stats(&self) -> serde_json::Value {
        self.inner.stats_json()
    }

    /// Forward/reverse routing index consistency check.
    pub fn audit_routing(&self) -> Result<(), String> {
        self.inner.core.lock().audit()
    }

    pub fn subscriptions_of(&self, node: &str) -> Vec<crate::wire::Subscription> {
        self.inner.core.lock().subscriptions_of(node)
    }

    pub fn session_count(&self) -> usize {
        self.inner.core.lock().sessions.len()
    }

    pub fn shutdown(&mut self) {
        if self.inner.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        // Self-connect to unblock accept, then drop every live connection.
        let _ = Stream::connect(&self.endpoint, Duration::from_millis(200));
        for session in self.inner.core.lock().all_sessions() {
            session.close();
        }
        for (_, conn) in self.inner.open_conns.lock().drain() {
            conn.shutdown();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        log::info!("broker on {} stopped", self.endpoint);
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl BrokerInner {
    fn stats_json(&self) -> serde_json::Value {
        self.core.lock().stats_json(&self.global)
    }

    fn handle_envelope(&self, env: MessageEnvelope, from: &Arc<Session>) {
        self.global.frames_rx.fetch_add(1, Ordering::Relaxed);
        if env.payload.len() > self.config.limits.max_payload {
            self.global.oversize.fetch_add(1, Ordering::Relaxed);
            return;
        }
        if env.topic.channel == STATS_REQUEST_CHANNEL {
            self.publish_stats(&from.node);
            return;
        }
        let dests = self.core.lock().route(&env, &from.node);
        if dests.is_empty() {
            self.global.no_route.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let now = Instant::now();
        for dest in &dests {
            dest.enqueue(env.clone(), now, &self.config);
        }
    }

    /// Answers a stats request with a directed JSON dump on the stats
    /// channel, routed like any other message (the requester must be
    /// subscribed to [`STATS_CHANNEL`]).
    fn publish_stats(&self, to_node: &str) {
        let payload = self.stats_json().to_string().into_bytes();
        let env = MessageEnvelope {
            topic: TopicAddress {
                channel: STATS_CHANNEL.to_string(),
                region: TopicRegion::Local,
                node_id: Some(to_node.to_string()),
                prio: 7,
            },
            publisher_id: BROKER_IDENTITY.to_string(),
            seq: self.broker_seq.fetch_add(1, Ordering::Relaxed) + 1,
            ts_monotonic_ns: mono_ns(),
            hop_count: 0,
            payload,
        };
        let dests = self.core.lock().route(&env, BROKER_IDENTITY);
        let now = Instant::now();
        for dest in dests {
            dest.enqueue(env.clone(), now, &self.config);
        }
    }

    fn retire_session(&self, session: &Arc<Session>) {
        self.global.delivered.fetch_add(
            session.stats.delivered.load(Ordering::Relaxed),
            Ordering::Relaxed,
        );
        session.close();
        // close() counts discarded queue contents into the session's dropped
        // counter, so fold it in afterwards.
        self.global.dropped.fetch_add(
            session.stats.dropped.load(Ordering::Relaxed),
            Ordering::Relaxed,
        );
    }

    fn write_state_region(&self) {
        let mut guard = self.state_writer.lock();
        if let Some(region) = guard.as_mut() {
            let (sessions, live_delivered) = {
                let core = self.core.lock();
                let live: u64 = core
                    .all_sessions()
                    .iter()
                    .map(|s| s.stats.delivered.load(Ordering::Relaxed))
                    .sum();
                (core.sessions.len() as i64, live)
            };
            let counters = GroupValues::I64(vec![
                sessions,
                (self.global.delivered.load(Ordering::Relaxed) + live_delivered) as i64,
                self.global.dropped.load(Ordering::Relaxed) as i64,
                self.global.expired_sessions.load(Ordering::Relaxed) as i64,
                self.global.frames_rx.load(Ordering::Relaxed) as i64,
                self.global.no_route.load(Ordering::Relaxed) as i64,
                self.started_at.elapsed().as_millis() as i64,
                std::process::id() as i64,
            ]);
            if let Err(e) = region.write_group("counters", &counters) {
                log::warn!("state region write failed: {e}");
            }
        }
    }
}

/// The broker's on-disk state region: created cold on every start (it is an
/// operational artifact, not durable state) so crash-and-delete followed by
/// a restart always comes up clean.
fn init_state_region(path: &std::path::Path) -> std::io::Result<Region> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let schema = RecordSchema::new(vec![FieldGroup::i64("counters", 8, WriterRole::Ingestion)]);
    Region::create(path, &schema)
        .and_then(|_| Region::open_writer(path, WriterRole::Ingestion))
        .map_err(|e| std::io::Error::other(e.to_string()))
}

fn accept_loop(inner: Arc<BrokerInner>, listener: Listener) {
    loop {
        let conn = match listener.accept() {
            Ok(c) => c,
            Err(e) => {
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(10));
                continue;
            }
        };
        if inner.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let conn_id = inner.next_conn_id.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = conn.try_clone() {
            inner.open_conns.lock().insert(conn_id, clone);
        }
        let inner2 = Arc::clone(&inner);
        let _ = std::thread::Builder::new()
            .name(format!("anchor-broker-conn-{conn_id}"))
            .spawn(move || {
                connection_loop(&inner2, conn, conn_id);
                inner2.open_conns.lock().remove(&conn_id);
            });
    }
}

fn connection_loop(inner: &BrokerInner, conn: Stream, conn_id: u64) {
    let peer = conn.peer();
    let limits = inner.config.limits;
    let read_half = match conn.try_clone() {
        Ok(c) => c,
        Err(e) => {
            log::warn!("conn {peer}: clone failed: {e}");
            return;
        }
    };
    let mut reader = FrameReader::new(read_half, limits);

    // Handshake: the first frame must be Register.
    let (identity, version) = match reader.next_frame() {
        Ok(Some(Frame::Register { identity, protocol_version })) => (identity, protocol_version),
        Ok(Some(other)) => {
            log::warn!("conn {peer}: expected register, got {}", other.type_name());
            conn.shutdown();
            return;
        }
        _ => {
            conn.shutdown();
            return;
        }
    };
    if version != PROTOCOL_VERSION {
        // Reject politely before hanging up.
        if let Ok(bytes) = encode_frame(
            &Frame::Ack {
                ref_seq: 0,
                status: AckStatus::VersionMismatch,
            },
            &limits,
        ) {
            let mut w = conn;
            let _ = w.write_all(&bytes);
            w.shutdown();
        }
        log::warn!("conn {peer}: protocol version {version} unsupported");
        return;
    }

    // Session setup: sink plus writer thread, newest-wins eviction.
    let (sink, frames_rx) = ChannelSink::new(inner.config.send_channel_frames);
    let write_half = match conn.try_clone() {
        Ok(c) => c,
        Err(_) => {
            conn.shutdown();
            return;
        }
    };
    let _ = std::thread::Builder::new()
        .name(format!("anchor-broker-send-{conn_id}"))
        .spawn(move || {
            let mut w = write_half;
            for buf in frames_rx {
                if buf.is_empty() {
                    break; // close marker
                }
                if w.write_all(&buf).is_err() {
                    break;
                }
            }
            w.shutdown();
        });

    let now = Instant::now();
    let (session, evicted) = {
        let mut core = inner.core.lock();
        let generation = core.next_generation();
        let session = Arc::new(Session::new(
            identity.clone(),
            generation,
            Box::new(sink),
            &inner.config,
            now,
        ));
        let evicted = core.install(Arc::clone(&session));
        (session, evicted)
    };
    if let Some(old) = evicted {
        inner.global.evicted_sessions.fetch_add(1, Ordering::Relaxed);
        inner.retire_session(&old);
        log::info!("node {identity}: new registration evicts previous session");
    }
    session.send_control(
        &Frame::Ack {
            ref_seq: 0,
            status: AckStatus::Ok,
        },
        &limits,
    );
    log::debug!("node {identity} registered from {peer}");

    // Steady state: every received frame refreshes liveness.
    loop {
        let frame = match reader.next_frame() {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                log::debug!("node {identity}: read error: {e}");
                break;
            }
        };
        session.touch(Instant::now(), inner.config.heartbeat_timeout);
        match frame {
            Frame::Data(env) => inner.handle_envelope(env, &session),
            Frame::Batch(envs) => {
                for env in envs {
                    inner.handle_envelope(env, &session);
                }
            }
            Frame::Subscribe(sub) => {
                let status = if sub.pattern_is_valid() {
                    inner
                        .core
                        .lock()
                        .add_subscription(&session.node, sub.clone());
                    AckStatus::Ok
                } else {
                    AckStatus::PatternInvalid
                };
                session.send_control(
                    &Frame::Ack {
                        ref_seq: sub.subscription_id,
                        status,
                    },
                    &limits,
                );
            }
            Frame::Unsubscribe { subscription_id } => {
                let known = inner
                    .core
                    .lock()
                    .remove_subscription(&session.node, subscription_id);
                session.send_control(
                    &Frame::Ack {
                        ref_seq: subscription_id,
                        status: if known {
                            AckStatus::Ok
                        } else {
                            AckStatus::UnknownSubscription
                        },
                    },
                    &limits,
                );
            }
            Frame::Heartbeat { ts_monotonic_ns, .. } => {
                // Echo with the sender's stamp so the client can match it.
                session.send_control(
                    &Frame::Heartbeat {
                        sender_id: BROKER_IDENTITY.to_string(),
                        ts_monotonic_ns,
                    },
                    &limits,
                );
            }
            Frame::Register { .. } => {
                log::debug!("node {identity}: duplicate register ignored");
            }
            Frame::Ack { .. } => {}
        }
        if inner.shutdown.load(Ordering::SeqCst) {
            break;
        }
    }

    // Remove only our own generation: a newer registration owns the name.
    let removed = inner
        .core
        .lock()
        .remove_session(&session.node, session.generation);
    if let Some(s) = removed {
        inner.retire_session(&s);
    } else {
        session.close();
    }
    log::debug!("node {identity} disconnected");
}

fn driver_loop(inner: Arc<BrokerInner>) {
    let tick = inner.config.effective_tick();
    let liveness_every = inner.config.liveness_every;
    let state_every = Duration::from_millis(250);
    let mut last_liveness = Instant::now();
    let mut last_state = Instant::now();
    while !inner.shutdown.load(Ordering::SeqCst) {
        std::thread::sleep(tick);
        let now = Instant::now();
        let sessions = inner.core.lock().all_sessions();
        for s in &sessions {
            s.pump(now, &inner.config);
        }
        if now.duration_since(last_liveness) >= liveness_every {
            last_liveness = now;
            let expired = inner.core.lock().take_expired(now);
            for s in expired {
                inner.global.expired_sessions.fetch_add(1, Ordering::Relaxed);
                log::info!("node {}: heartbeat deadline passed, session expired", s.node);
                inner.retire_session(&s);
            }
        }
        if now.duration_since(last_state) >= state_every {
            last_state = now;
            inner.write_state_region();
        }
    }
}
