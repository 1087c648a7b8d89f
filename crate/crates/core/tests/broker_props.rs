//! Model-based property suite for routing, priority scheduling, bounded
//! queues and liveness expiry.
//!
//! Random operation sequences drive the deterministic broker simulator
//! (which runs the production routing core and send path) next to an
//! independent external model. After every operation the per-node frame
//! trace is replayed against mirror queues implementing the contract
//! directly: drop-oldest within a priority at capacity, strict priority
//! across queues, FIFO within one, delivery only to matching subscriptions.

use std::collections::{HashMap, VecDeque};
use std::time::Duration;

use proptest::prelude::*;

use anchor_core::broker::testkit::Sim;
use anchor_core::broker::BrokerConfig;
use anchor_core::wire::{
    DeliveryScope, MessageEnvelope, Region, RegionFilter, Subscription, TopicAddress,
};

const NODES: &[&str] = &["n0", "n1", "n2", "n3"];
const CHANNELS: &[&str] = &["alpha", "beta", "gamma"];
const HEARTBEAT_TIMEOUT_MS: u64 = 1500;

#[derive(Debug, Clone)]
enum Op {
    Register(usize),
    Subscribe {
        node: usize,
        sub_id: u64,
        channel: usize, // CHANNELS.len() means "*"
        scope: u8,
        allow_self: bool,
    },
    Unsubscribe { node: usize, sub_id: u64 },
    Publish {
        publisher: usize,
        channel: usize,
        prio: u8,
        directed: Option<usize>,
        payload_len: usize,
    },
    SinkIdle { node: usize, idle: bool },
    Advance { ms: u64 },
    ExpireSweep,
}

fn op_strategy() -> impl Strategy<Value = Op> {
    let node = 0..NODES.len();
    prop_oneof![
        2 => node.clone().prop_map(Op::Register),
        3 => (0..NODES.len(), 1u64..6, 0..=CHANNELS.len(), 0u8..3, any::<bool>()).prop_map(
            |(node, sub_id, channel, scope, allow_self)| Op::Subscribe {
                node,
                sub_id,
                channel,
                scope,
                allow_self
            }
        ),
        1 => (0..NODES.len(), 1u64..6).prop_map(|(node, sub_id)| Op::Unsubscribe { node, sub_id }),
        8 => (
            0..NODES.len(),
            0..CHANNELS.len(),
            0u8..=7,
            proptest::option::of(0..NODES.len()),
            0usize..64,
        )
            .prop_map(|(publisher, channel, prio, directed, payload_len)| Op::Publish {
                publisher,
                channel,
                prio,
                directed,
                payload_len
            }),
        2 => (0..NODES.len(), any::<bool>()).prop_map(|(node, idle)| Op::SinkIdle { node, idle }),
        2 => (1u64..400).prop_map(|ms| Op::Advance { ms }),
        1 => Just(Op::ExpireSweep),
    ]
}

/// External mirror of one session's outbound state.
#[derive(Default)]
struct MirrorSession {
    queues: [VecDeque<(String, u64, u8)>; 8], // (publisher, seq, prio)
    dropped: u64,
    delivered_frames: usize,
    delivered_msgs: usize,
}

struct Model {
    registered: HashMap<String, u64>, // node -> last refresh (model ms)
    subs: HashMap<String, HashMap<u64, Subscription>>,
    sessions: HashMap<String, MirrorSession>,
    now_ms: u64,
    queue_capacity: usize,
}

impl Model {
    fn new(queue_capacity: usize) -> Model {
        Model {
            registered: HashMap::new(),
            subs: HashMap::new(),
            sessions: HashMap::new(),
            now_ms: 0,
            queue_capacity,
        }
    }

    fn touch(&mut self, node: &str) {
        if let Some(t) = self.registered.get_mut(node) {
            *t = self.now_ms;
        }
    }

    fn register(&mut self, node: &str) {
        self.registered.insert(node.to_string(), self.now_ms);
        self.subs.remove(node);
        self.sessions.insert(node.to_string(), MirrorSession::default());
    }

    fn route(&self, env: &MessageEnvelope, publisher: &str) -> Vec<String> {
        let mut out: Vec<String> = self
            .subs
            .iter()
            .filter(|(node, _)| self.registered.contains_key(*node))
            .filter(|(node, subs)| {
                subs.values().any(|sub| {
                    if node.as_str() == publisher && !sub.allow_self {
                        return false;
                    }
                    sub.matches(env, node)
                })
            })
            .map(|(node, _)| node.clone())
            .collect();
        out.sort();
        out
    }

    fn enqueue(&mut self, node: &str, env: &MessageEnvelope) {
        let s = self.sessions.get_mut(node).expect("routed to a session");
        let q = &mut s.queues[env.topic.prio as usize];
        if q.len() >= self.queue_capacity {
            q.pop_front();
            s.dropped += 1;
        }
        q.push_back((env.publisher_id.clone(), env.seq, env.topic.prio));
    }

    fn expire_sweep(&mut self) -> Vec<String> {
        let cutoff = self.now_ms;
        let expired: Vec<String> = self
            .registered
            .iter()
            .filter(|(_, &t)| t + HEARTBEAT_TIMEOUT_MS < cutoff)
            .map(|(n, _)| n.clone())
            .collect();
        for n in &expired {
            self.registered.remove(n);
            self.subs.remove(n);
            self.sessions.remove(n);
        }
        let mut sorted = expired;
        sorted.sort();
        sorted
    }
}

fn build_sub(sub_id: u64, channel: usize, scope: u8, allow_self: bool) -> Subscription {
    Subscription {
        subscription_id: sub_id,
        channel_pattern: if channel == CHANNELS.len() {
            "*".to_string()
        } else {
            CHANNELS[channel].to_string()
        },
        region_filter: RegionFilter::Any,
        scope: match scope {
            0 => DeliveryScope::Standard,
            1 => DeliveryScope::DirectedOnly,
            _ => DeliveryScope::All,
        },
        allow_self,
    }
}

/// Consumes newly handed-off frames for `node` and replays them against the
/// mirror queues: every frame must pop exactly in strict-priority FIFO order
/// from the state accumulated so far.
fn check_new_frames(sim: &Sim, model: &mut Model, node: &str) -> Result<(), TestCaseError> {
    let Some(mirror) = model.sessions.get_mut(node) else {
        return Ok(());
    };
    let all = sim.delivered(node);
    let new = &all[mirror.delivered_msgs..];
    for env in new {
        // Strict priority: the highest non-empty mirror queue must match.
        let expected = (0..8usize)
            .rev()
            .find_map(|p| mirror.queues[p].front().cloned().map(|m| (p, m)));
        match expected {
            Some((p, (publisher, seq, prio))) => {
                prop_assert_eq!(
                    (env.publisher_id.as_str(), env.seq, env.topic.prio),
                    (publisher.as_str(), seq, prio),
                    "delivery order violates strict-priority FIFO for {}",
                    node
                );
                mirror.queues[p].pop_front();
            }
            None => {
                return Err(TestCaseError::fail(format!(
                    "{node} received {}#{} with empty mirror queues",
                    env.publisher_id, env.seq
                )))
            }
        }
        mirror.delivered_msgs += 1;
    }
    mirror.delivered_frames = sim.frames_sent(node);
    // Bounded queues and drop accounting stay in lockstep.
    let mirror_queued: usize = mirror.queues.iter().map(VecDeque::len).sum();
    prop_assert_eq!(sim.queued(node), mirror_queued, "queue depth diverged for {}", node);
    prop_assert_eq!(sim.dropped(node), mirror.dropped, "drop count diverged for {}", node);
    prop_assert!(mirror_queued <= 8 * model.queue_capacity);
    Ok(())
}

fn check_all(sim: &Sim, model: &mut Model) -> Result<(), TestCaseError> {
    for node in NODES {
        check_new_frames(sim, model, node)?;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn routing_priority_ordering_and_expiry_hold(ops in proptest::collection::vec(op_strategy(), 1..120)) {
        let mut cfg = BrokerConfig::default();
        cfg.queue_capacity = 8; // small enough that drop-oldest actually fires
        cfg.heartbeat_timeout = Duration::from_millis(HEARTBEAT_TIMEOUT_MS);
        let queue_capacity = cfg.queue_capacity;
        let mut sim = Sim::new(cfg);
        let mut model = Model::new(queue_capacity);
        let mut seqs: HashMap<(String, String), u64> = HashMap::new();

        for op in ops {
            match op {
                Op::Register(n) => {
                    let node = NODES[n];
                    sim.register(node);
                    model.register(node);
                }
                Op::Subscribe { node, sub_id, channel, scope, allow_self } => {
                    let name = NODES[node];
                    let sub = build_sub(sub_id, channel, scope, allow_self);
                    let accepted = sim.subscribe(name, sub.clone());
                    let model_registered = model.registered.contains_key(name);
                    prop_assert_eq!(accepted, model_registered, "subscribe acceptance diverged");
                    if accepted {
                        model.touch(name);
                        model.subs.entry(name.to_string()).or_default().insert(sub_id, sub);
                    }
                }
                Op::Unsubscribe { node, sub_id } => {
                    let name = NODES[node];
                    let removed = sim.unsubscribe(name, sub_id);
                    model.touch(name);
                    let model_removed = model
                        .subs
                        .get_mut(name)
                        .map(|s| s.remove(&sub_id).is_some())
                        .unwrap_or(false);
                    prop_assert_eq!(removed, model_removed, "unsubscribe diverged");
                }
                Op::Publish { publisher, channel, prio, directed, payload_len } => {
                    let name = NODES[publisher];
                    if !model.registered.contains_key(name) {
                        // The live broker only accepts publishes over a
                        // registered connection; mirror that precondition.
                        continue;
                    }
                    let seq = {
                        let c = seqs
                            .entry((name.to_string(), CHANNELS[channel].to_string()))
                            .or_insert(0);
                        *c += 1;
                        *c
                    };
                    let env = MessageEnvelope {
                        topic: TopicAddress {
                            channel: CHANNELS[channel].to_string(),
                            region: Region::Local,
                            node_id: directed.map(|d| NODES[d].to_string()),
                            prio,
                        },
                        publisher_id: name.to_string(),
                        seq,
                        ts_monotonic_ns: 0,
                        hop_count: 0,
                        payload: vec![0xAB; payload_len],
                    };
                    let mut dests = sim.publish(name, env.clone());
                    dests.sort();
                    model.touch(name);
                    let expected = model.route(&env, name);
                    prop_assert_eq!(&dests, &expected, "routing decision diverged");
                    for d in &expected {
                        model.enqueue(d, &env);
                    }
                }
                Op::SinkIdle { node, idle } => {
                    sim.set_sink_idle(NODES[node], idle);
                }
                Op::Advance { ms } => {
                    sim.advance(Duration::from_millis(ms));
                    model.now_ms += ms;
                }
                Op::ExpireSweep => {
                    let mut expired = sim.expire_now();
                    expired.sort();
                    let model_expired = model.expire_sweep();
                    prop_assert_eq!(expired, model_expired, "expiry set diverged");
                }
            }
            sim.audit().map_err(TestCaseError::fail)?;
            check_all(&sim, &mut model)?;
        }

        // Drain everything and verify the tail of the trace too.
        for node in NODES {
            sim.set_sink_idle(node, true);
        }
        sim.advance(Duration::from_millis(5));
        check_all(&sim, &mut model)?;

        // Per-publisher order: within (publisher, channel, prio), delivered
        // seqs strictly increase (drops leave gaps, never reordering).
        for node in NODES {
            let mut last: HashMap<(String, String, u8), u64> = HashMap::new();
            for env in sim.delivered(node) {
                let key = (env.publisher_id.clone(), env.topic.channel.clone(), env.topic.prio);
                if let Some(prev) = last.get(&key) {
                    prop_assert!(
                        env.seq > *prev,
                        "{} observed seq {} after {} for {:?}",
                        node, env.seq, prev, key
                    );
                }
                last.insert(key, env.seq);
            }
        }
    }
}
