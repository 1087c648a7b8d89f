//! Deterministic in-process broker simulator.
//!
//! Drives the real routing core and session send path (the same `Core`,
//! `Session` and `Outbound` the live broker uses) without sockets or
//! threads: time is an explicit parameter and delivered frames pile up in
//! capturing sinks. The routing/priority/ordering property suites and the
//! acceptance tests use this to explore operation sequences that would be
//! timing-dependent against a live broker.

use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::wire::{decode_frame, Frame, MessageEnvelope, Subscription, WireLimits};

use super::session::{CaptureSink, Session};
use super::{BrokerConfig, Core, GlobalStats};

pub struct Sim {
    config: BrokerConfig,
    core: Core,
    global: GlobalStats,
    now: Instant,
    sinks: HashMap<String, Arc<CaptureSink>>,
}

impl Sim {
    pub fn new(config: BrokerConfig) -> Sim {
        Sim {
            config,
            core: Core::new(),
            global: GlobalStats::default(),
            now: Instant::now(),
            sinks: HashMap::new(),
        }
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    /// Moves simulated time forward and runs the periodic driver work
    /// (send-path pump for every session).
    pub fn advance(&mut self, d: Duration) {
        self.now += d;
        for s in self.core.all_sessions() {
            s.pump(self.now, &self.config);
        }
    }

    /// Registers a node with a fresh capturing sink; an existing session
    /// under the same identity is evicted, newest wins.
    pub fn register(&mut self, node: &str) {
        let sink = Arc::new(CaptureSink::new());
        let generation = self.core.next_generation();
        let session = Arc::new(Session::new(
            node.to_string(),
            generation,
            Box::new(SharedSink(Arc::clone(&sink))),
            &self.config,
            self.now,
        ));
        if let Some(old) = self.core.install(session) {
            old.close();
        }
        self.sinks.insert(node.to_string(), sink);
    }

    pub fn subscribe(&mut self, node: &str, sub: Subscription) -> bool {
        if !self.core.sessions.contains_key(node) || !sub.pattern_is_valid() {
            return false;
        }
        self.touch(node);
        self.core.add_subscription(node, sub);
        true
    }

    pub fn unsubscribe(&mut self, node: &str, sub_id: u64) -> bool {
        self.touch(node);
        self.core.remove_subscription(node, sub_id)
    }

    /// Routes and enqueues as if `publisher_node`'s connection delivered the
    /// envelope. Returns the destination node ids, in routing order.
    pub fn publish(&mut self, publisher_node: &str, env: MessageEnvelope) -> Vec<String> {
        self.touch(publisher_node);
        let dests = self.core.route(&env, publisher_node);
        let names: Vec<String> = dests.iter().map(|s| s.node.clone()).collect();
        if dests.is_empty() {
            self.global.no_route.fetch_add(1, Ordering::Relaxed);
        }
        for dest in &dests {
            dest.enqueue(env.clone(), self.now, &self.config);
        }
        names
    }

    /// Refreshes a node's heartbeat deadline, as any received frame would.
    pub fn touch(&mut self, node: &str) {
        if let Some(s) = self.core.sessions.get(node) {
            s.touch(self.now, self.config.heartbeat_timeout);
        }
    }

    /// Runs the liveness sweep at the current simulated time; returns the
    /// expired node ids.
    pub fn expire_now(&mut self) -> Vec<String> {
        let expired = self.core.take_expired(self.now);
        let mut names = Vec::new();
        for s in expired {
            names.push(s.node.clone());
            s.close();
        }
        names
    }

    pub fn audit(&self) -> Result<(), String> {
        self.core.audit()
    }

    pub fn session_count(&self) -> usize {
        self.core.sessions.len()
    }

    pub fn is_registered(&self, node: &str) -> bool {
        self.core.sessions.contains_key(node)
    }

    /// Messages queued broker-side for a node (all priorities plus pending
    /// batch), for bounded-memory assertions.
    pub fn queued(&self, node: &str) -> usize {
        self.core
            .sessions
            .get(node)
            .map(|s| s.queued_now())
            .unwrap_or(0)
    }

    pub fn dropped(&self, node: &str) -> u64 {
        self.core
            .sessions
            .get(node)
            .map(|s| s.stats.dropped.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    /// Controls whether the node's sink reports itself idle. A busy sink
    /// disables the eager flush path so backlog can build up, which is how
    /// the strict-priority tests create contention deterministically.
    pub fn set_sink_idle(&mut self, node: &str, idle: bool) {
        if let Some(sink) = self.sinks.get(node) {
            sink.report_idle.store(idle, Ordering::Relaxed);
        }
    }

    /// Caps how many frames the node's sink accepts before reporting
    /// backpressure (u64::MAX lifts the cap).
    pub fn set_sink_capacity(&mut self, node: &str, capacity: u64) {
        if let Some(sink) = self.sinks.get(node) {
            sink.capacity.store(capacity, Ordering::Relaxed);
        }
    }

    /// Envelopes handed to the node's sender so far, flattened across Data
    /// and Batch frames in handoff order.
    pub fn delivered(&self, node: &str) -> Vec<MessageEnvelope> {
        let Some(sink) = self.sinks.get(node) else {
            return Vec::new();
        };
        let frames = sink.frames.lock();
        let mut out = Vec::new();
        for bytes in frames.iter() {
            let mut off = 0usize;
            while off < bytes.len() {
                let (frame, used) =
                    decode_frame(&bytes[off..], &self.config.limits).expect("sink holds valid frames");
                off += used;
                match frame {
                    Frame::Data(env) => out.push(env),
                    Frame::Batch(envs) => out.extend(envs),
                    _ => {}
                }
            }
        }
        out
    }

    /// Raw frame count handed to the node's sender (batches count once).
    pub fn frames_sent(&self, node: &str) -> usize {
        self.sinks
            .get(node)
            .map(|s| s.frames.lock().len())
            .unwrap_or(0)
    }

    pub fn limits(&self) -> WireLimits {
        self.config.limits
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }
}

/// Adapter so several Sim inspection paths can share one capture sink.
struct SharedSink(Arc<CaptureSink>);

impl super::session::FrameSink for SharedSink {
    fn try_send(&self, frame: Vec<u8>) -> Result<(), Vec<u8>> {
        self.0.try_send(frame)
    }

    fn is_idle(&self) -> bool {
        self.0.is_idle()
    }

    fn close(&self) {
        self.0.close()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{Region, TopicAddress};

    fn env(channel: &str, prio: u8, publisher: &str, seq: u64) -> MessageEnvelope {
        MessageEnvelope {
            topic: TopicAddress {
                channel: channel.into(),
                region: Region::Local,
                node_id: None,
                prio,
            },
            publisher_id: publisher.into(),
            seq,
            ts_monotonic_ns: 0,
            hop_count: 0,
            payload: vec![0u8; 16],
        }
    }

    fn directed(channel: &str, prio: u8, publisher: &str, seq: u64, node: &str) -> MessageEnvelope {
        let mut e = env(channel, prio, publisher, seq);
        e.topic.node_id = Some(node.into());
        e
    }

    #[test]
    fn register_twice_keeps_one_session() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("n1");
        sim.register("n1");
        assert_eq!(sim.session_count(), 1);
        sim.audit().unwrap();
    }

    #[test]
    fn routing_matches_channel_and_excludes_publisher() {
        let mut sim = Sim::new(BrokerConfig::default());
        for n in ["pub", "n1", "n2"] {
            sim.register(n);
        }
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.subscribe("n2", Subscription::new(1, "status"));
        let dests = sim.publish("pub", env("cmd", 3, "pub", 1));
        assert_eq!(dests, vec!["n1".to_string()]);

        // Publisher self-delivery requires allow_self.
        sim.subscribe("pub", Subscription::new(1, "cmd"));
        assert_eq!(sim.publish("pub", env("cmd", 3, "pub", 2)), vec!["n1".to_string()]);
        let mut allow = Subscription::new(2, "cmd");
        allow.allow_self = true;
        sim.subscribe("pub", allow);
        let mut dests = sim.publish("pub", env("cmd", 3, "pub", 3));
        dests.sort();
        assert_eq!(dests, vec!["n1".to_string(), "pub".to_string()]);
    }

    #[test]
    fn directed_delivery_reaches_only_the_target() {
        let mut sim = Sim::new(BrokerConfig::default());
        for n in ["pub", "n1", "n2"] {
            sim.register(n);
        }
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.subscribe("n2", Subscription::new(1, "cmd"));
        let dests = sim.publish("pub", directed("cmd", 3, "pub", 1, "n2"));
        assert_eq!(dests, vec!["n2".to_string()]);
    }

    #[test]
    fn wildcard_subscription_sees_all_channels() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(1, "*"));
        assert_eq!(sim.publish("pub", env("anything", 0, "pub", 1)).len(), 1);
        assert_eq!(sim.publish("pub", env("else", 7, "pub", 2)).len(), 1);
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(9, "cmd"));
        assert_eq!(sim.publish("pub", env("cmd", 1, "pub", 1)).len(), 1);
        assert!(sim.unsubscribe("n1", 9));
        assert_eq!(sim.publish("pub", env("cmd", 1, "pub", 2)).len(), 0);
        sim.audit().unwrap();
    }

    #[test]
    fn no_matching_subscription_routes_nowhere() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("pub");
        assert!(sim.publish("pub", env("cmd", 1, "pub", 1)).is_empty());
    }

    #[test]
    fn drop_oldest_within_same_priority() {
        let mut cfg = BrokerConfig::default();
        cfg.queue_capacity = 4;
        let mut sim = Sim::new(cfg);
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.set_sink_idle("n1", false);
        sim.set_sink_capacity("n1", 0);
        for seq in 1..=5 {
            sim.publish("pub", env("cmd", 0, "pub", seq));
        }
        assert_eq!(sim.dropped("n1"), 1);
        assert_eq!(sim.queued("n1"), 4);
        sim.set_sink_capacity("n1", u64::MAX);
        sim.set_sink_idle("n1", true);
        sim.advance(Duration::from_millis(2));
        let seqs: Vec<u64> = sim.delivered("n1").iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![2, 3, 4, 5], "oldest same-priority message dropped");
    }

    #[test]
    fn strict_priority_dequeue_order() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.set_sink_idle("n1", false); // build a backlog
        for seq in 1..=100 {
            sim.publish("pub", env("cmd", 0, "pub", seq));
        }
        sim.publish("pub", env("cmd", 7, "pub", 1000));
        sim.set_sink_idle("n1", true);
        sim.advance(Duration::from_millis(2));
        let delivered = sim.delivered("n1");
        assert_eq!(delivered.len(), 101);
        assert_eq!(delivered[0].seq, 1000, "prio 7 leaves before 100 queued prio 0");
        let rest: Vec<u64> = delivered[1..].iter().map(|e| e.seq).collect();
        assert_eq!(rest, (1..=100).collect::<Vec<u64>>(), "FIFO within a priority");
    }

    #[test]
    fn expiry_removes_sessions_and_their_routes() {
        let mut cfg = BrokerConfig::default();
        cfg.heartbeat_timeout = Duration::from_millis(1500);
        let mut sim = Sim::new(cfg);
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.advance(Duration::from_millis(1000));
        sim.touch("pub");
        sim.advance(Duration::from_millis(900));
        // n1 has been silent for 1.9 s; pub refreshed at 1.0 s.
        let expired = sim.expire_now();
        assert_eq!(expired, vec!["n1".to_string()]);
        assert!(sim.is_registered("pub"), "frames keep a node alive");
        assert_eq!(sim.publish("pub", env("cmd", 1, "pub", 1)).len(), 0);
        sim.audit().unwrap();
    }

    #[test]
    fn batch_forms_under_size_threshold_when_sender_is_busy() {
        let mut cfg = BrokerConfig::default();
        cfg.batch_bytes_threshold = 64 * 1024;
        let mut sim = Sim::new(cfg);
        sim.register("pub");
        sim.register("n1");
        sim.subscribe("n1", Subscription::new(1, "cmd"));
        sim.set_sink_idle("n1", false);
        // 600 x 128 B payloads overflow the 64 KiB threshold well before the
        // residence bound; the flush must happen on size alone.
        for seq in 1..=600u64 {
            let mut e = env("cmd", 3, "pub", seq);
            e.payload = vec![0u8; 128];
            sim.publish("pub", e);
        }
        let frames = sim.frames_sent("n1");
        assert!(frames >= 1, "size threshold must have flushed");
        let delivered = sim.delivered("n1");
        assert!(delivered.len() >= 300, "most of the burst left in batches");
        assert!(
            sim.frames_sent("n1") < delivered.len(),
            "flushes carried multi-message batch frames"
        );
    }

    #[test]
    fn empty_queues_send_nothing_on_tick() {
        let mut sim = Sim::new(BrokerConfig::default());
        sim.register("n1");
        sim.advance(Duration::from_millis(5));
        assert_eq!(sim.frames_sent("n1"), 0);
    }
}
