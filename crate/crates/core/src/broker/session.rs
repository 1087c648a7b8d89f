//! Broker-side view of one connected node: bounded per-priority queues, the
//! pending batch awaiting the asynchronous sender, and liveness bookkeeping.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use parking_lot::Mutex;

use crate::clock::mono_ns;
use crate::wire::{encode_frame, encoded_envelope_len, Frame, MessageEnvelope, WireLimits};

use super::BrokerConfig;

pub(crate) const PRIORITIES: usize = 8;

/// Non-blocking handoff to whatever carries frames to the node.
pub(crate) trait FrameSink: Send + Sync {
    /// Hands one encoded frame to the sender. `Err(frame)` means the sender
    /// is saturated; the caller keeps the messages and retries next tick.
    fn try_send(&self, frame: Vec<u8>) -> Result<(), Vec<u8>>;
    /// True when the sender has nothing waiting, i.e. batching would add
    /// latency without any throughput benefit.
    fn is_idle(&self) -> bool;
    fn close(&self);
}

/// Sink backed by a bounded channel drained by a writer thread.
pub(crate) struct ChannelSink {
    tx: Sender<Vec<u8>>,
    closed: AtomicBool,
}

impl ChannelSink {
    pub(crate) fn new(capacity: usize) -> (ChannelSink, Receiver<Vec<u8>>) {
        let (tx, rx) = bounded(capacity);
        (
            ChannelSink {
                tx,
                closed: AtomicBool::new(false),
            },
            rx,
        )
    }
}

impl FrameSink for ChannelSink {
    fn try_send(&self, frame: Vec<u8>) -> Result<(), Vec<u8>> {
        if self.closed.load(Ordering::Relaxed) {
            return Ok(()); // dead session, silently discard
        }
        match self.tx.try_send(frame) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(f)) => Err(f),
            Err(TrySendError::Disconnected(_)) => Ok(()),
        }
    }

    fn is_idle(&self) -> bool {
        self.tx.is_empty()
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Relaxed);
        // Empty frame is the writer thread's stop marker.
        let _ = self.tx.try_send(Vec::new());
    }
}

#[derive(Default)]
pub struct SessionStats {
    pub delivered: AtomicU64,
    pub dropped: AtomicU64,
    pub batches: AtomicU64,
    pub enqueued: AtomicU64,
}

struct Queued {
    env: MessageEnvelope,
    enqueue_at: Instant,
    enqueue_ns: u64,
    wire_len: usize,
}

struct PendingBatch {
    msgs: Vec<Queued>,
}

/// Outbound state: eight bounded FIFO queues (drop-oldest within the same
/// priority), plus the batch assembled but not yet accepted by the sink.
pub(crate) struct Outbound {
    queues: [VecDeque<Queued>; PRIORITIES],
    queued_bytes: usize,
    pending: Option<PendingBatch>,
    queue_capacity: usize,
}

impl Outbound {
    fn new(queue_capacity: usize) -> Outbound {
        Outbound {
            queues: Default::default(),
            queued_bytes: 0,
            pending: None,
            queue_capacity,
        }
    }

    fn total_queued(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Earliest enqueue instant across all waiting messages.
    fn oldest(&self) -> Option<Instant> {
        self.queues
            .iter()
            .filter_map(|q| q.front().map(|m| m.enqueue_at))
            .min()
    }

    fn push(&mut self, env: MessageEnvelope, now: Instant, stats: &SessionStats) {
        let wire_len = encoded_envelope_len(&env);
        let q = &mut self.queues[env.topic.prio as usize];
        if q.len() >= self.queue_capacity {
            if let Some(old) = q.pop_front() {
                self.queued_bytes -= old.wire_len;
                stats.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.queued_bytes += wire_len;
        q.push_back(Queued {
            env,
            enqueue_at: now,
            enqueue_ns: mono_ns(),
            wire_len,
        });
        stats.enqueued.fetch_add(1, Ordering::Relaxed);
    }

    /// Moves messages out of the queues into a batch, highest priority
    /// first, FIFO within a priority, stopping at `budget` bytes.
    fn assemble(&mut self, budget: usize) -> PendingBatch {
        let mut msgs = Vec::new();
        let mut bytes = 0usize;
        'outer: for prio in (0..PRIORITIES).rev() {
            while let Some(front) = self.queues[prio].front() {
                if !msgs.is_empty() && bytes + front.wire_len > budget {
                    break 'outer;
                }
                let m = self.queues[prio].pop_front().unwrap();
                self.queued_bytes -= m.wire_len;
                bytes += m.wire_len;
                msgs.push(m);
            }
        }
        PendingBatch { msgs }
    }

    fn discard_all(&mut self, stats: &SessionStats) {
        let mut n = self.total_queued();
        if let Some(p) = self.pending.take() {
            n += p.msgs.len();
        }
        for q in &mut self.queues {
            q.clear();
        }
        self.queued_bytes = 0;
        stats.dropped.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// One registered node.
pub struct Session {
    pub(crate) node: String,
    pub(crate) generation: u64,
    pub(crate) out: Mutex<Outbound>,
    pub(crate) sink: Box<dyn FrameSink>,
    pub(crate) heartbeat_deadline: Mutex<Instant>,
    pub(crate) alive: AtomicBool,
    pub stats: SessionStats,
}

impl Session {
    pub(crate) fn new(
        node: String,
        generation: u64,
        sink: Box<dyn FrameSink>,
        cfg: &BrokerConfig,
        now: Instant,
    ) -> Session {
        Session {
            node,
            generation,
            out: Mutex::new(Outbound::new(cfg.queue_capacity)),
            sink,
            heartbeat_deadline: Mutex::new(now + cfg.heartbeat_timeout),
            alive: AtomicBool::new(true),
            stats: SessionStats::default(),
        }
    }

    pub(crate) fn touch(&self, now: Instant, timeout: Duration) {
        *self.heartbeat_deadline.lock() = now + timeout;
    }

    pub(crate) fn expired(&self, now: Instant) -> bool {
        *self.heartbeat_deadline.lock() < now
    }

    /// Queues an envelope for this node and gives the send path a chance to
    /// run (size trigger or idle sender flush immediately).
    pub(crate) fn enqueue(&self, env: MessageEnvelope, now: Instant, cfg: &BrokerConfig) {
        {
            let mut out = self.out.lock();
            out.push(env, now, &self.stats);
        }
        self.pump(now, cfg);
    }

    /// Control frames (acks, heartbeat echoes) bypass the data queues so a
    /// data backlog cannot starve the registration handshake.
    pub(crate) fn send_control(&self, frame: &Frame, limits: &WireLimits) {
        if let Ok(bytes) = encode_frame(frame, limits) {
            let _ = self.sink.try_send(bytes);
        }
    }

    /// The send path. Builds and hands off frames while a flush condition
    /// holds: accumulated bytes over the batch threshold, the oldest waiting
    /// message older than the residence bound, or an idle sender (nothing to
    /// gain by waiting). Returns frames handed to the sink.
    pub(crate) fn pump(&self, now: Instant, cfg: &BrokerConfig) -> usize {
        let mut out = self.out.lock();
        let mut sent = 0usize;
        loop {
            if let Some(pending) = out.pending.take() {
                match self.hand_off(pending, cfg) {
                    Ok(()) => {
                        sent += 1;
                        continue;
                    }
                    Err(pending) => {
                        // Sender saturated; retry on a later tick.
                        out.pending = Some(pending);
                        return sent;
                    }
                }
            }
            if out.total_queued() == 0 {
                return sent;
            }
            let due = out
                .oldest()
                .map(|t| now.saturating_duration_since(t) >= cfg.max_residence)
                .unwrap_or(false);
            let trigger =
                due || out.queued_bytes >= cfg.batch_bytes_threshold || self.sink.is_idle();
            if !trigger {
                return sent;
            }
            let budget = cfg.limits.max_frame.saturating_sub(64);
            let batch = out.assemble(budget);
            out.pending = Some(batch);
        }
    }

    fn hand_off(&self, pending: PendingBatch, cfg: &BrokerConfig) -> Result<(), PendingBatch> {
        if pending.msgs.is_empty() {
            return Ok(());
        }
        let frame = if pending.msgs.len() == 1 {
            Frame::Data(pending.msgs[0].env.clone())
        } else {
            Frame::Batch(pending.msgs.iter().map(|m| m.env.clone()).collect())
        };
        let bytes = match encode_frame(&frame, &cfg.limits) {
            Ok(b) => b,
            Err(e) => {
                // Cannot happen while assemble() respects the frame budget.
                log::error!("dropping unencodable batch: {e}");
                self.stats
                    .dropped
                    .fetch_add(pending.msgs.len() as u64, Ordering::Relaxed);
                return Ok(());
            }
        };
        match self.sink.try_send(bytes) {
            Ok(()) => {
                let count = pending.msgs.len() as u64;
                self.stats.delivered.fetch_add(count, Ordering::Relaxed);
                if count > 1 {
                    self.stats.batches.fetch_add(1, Ordering::Relaxed);
                }
                if let Some(instr) = &cfg.instrumentation {
                    let send_ns = mono_ns();
                    let mut records = instr.records.lock();
                    for m in &pending.msgs {
                        records.push(super::SendRecord {
                            publisher: m.env.publisher_id.clone(),
                            seq: m.env.seq,
                            prio: m.env.topic.prio,
                            enqueue_ns: m.enqueue_ns,
                            send_initiated_ns: send_ns,
                            batched_with: count as usize,
                        });
                    }
                }
                Ok(())
            }
            Err(_) => Err(pending),
        }
    }

    /// Tears the session down: marks it dead, discards queued traffic
    /// (counted as drops) and closes the sender.
    pub(crate) fn close(&self) {
        if self.alive.swap(false, Ordering::SeqCst) {
            self.out.lock().discard_all(&self.stats);
            self.sink.close();
        }
    }

    pub(crate) fn queued_now(&self) -> usize {
        let out = self.out.lock();
        out.total_queued() + out.pending.as_ref().map(|p| p.msgs.len()).unwrap_or(0)
    }
}

/// Instrumented capture sink for tests: frames pile up in memory and
/// capacity/idleness are scriptable.
pub(crate) struct CaptureSink {
    pub frames: Mutex<Vec<Vec<u8>>>,
    pub capacity: AtomicU64,
    pub report_idle: AtomicBool,
}

impl CaptureSink {
    pub(crate) fn new() -> CaptureSink {
        CaptureSink {
            frames: Mutex::new(Vec::new()),
            capacity: AtomicU64::new(u64::MAX),
            report_idle: AtomicBool::new(true),
        }
    }
}

impl FrameSink for CaptureSink {
    fn try_send(&self, frame: Vec<u8>) -> Result<(), Vec<u8>> {
        let mut frames = self.frames.lock();
        if (frames.len() as u64) >= self.capacity.load(Ordering::Relaxed) {
            return Err(frame);
        }
        frames.push(frame);
        Ok(())
    }

    fn is_idle(&self) -> bool {
        self.report_idle.load(Ordering::Relaxed)
    }

    fn close(&self) {}
}
