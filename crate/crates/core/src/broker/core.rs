//! Routing state: the session map and the subscription indices.
//!
//! All mutation happens under one lock (the broker's coordination context);
//! the lock is never held across network sends. Routing keeps a forward
//! index (channel -> subscribers) and a reverse index (node -> subscription
//! ids) that must stay mutually consistent; `audit` verifies that and the
//! property suite drives it through random operation sequences.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use crate::wire::{MessageEnvelope, Subscription};

use super::session::Session;

pub(crate) struct Core {
    pub sessions: HashMap<String, Arc<Session>>,
    pub subs: BTreeMap<(String, u64), Subscription>,
    /// channel token -> (node, subscription) entries with that exact channel.
    exact: HashMap<String, BTreeSet<(String, u64)>>,
    /// Entries whose channel pattern is "*".
    wildcard: BTreeSet<(String, u64)>,
    /// Reverse index: node -> its subscription ids.
    by_node: HashMap<String, BTreeSet<u64>>,
    next_generation: u64,
}

impl Core {
    pub fn new() -> Core {
        Core {
            sessions: HashMap::new(),
            subs: BTreeMap::new(),
            exact: HashMap::new(),
            wildcard: BTreeSet::new(),
            by_node: HashMap::new(),
            next_generation: 1,
        }
    }

    pub fn next_generation(&mut self) -> u64 {
        let g = self.next_generation;
        self.next_generation += 1;
        g
    }

    /// Installs a session; an existing session under the same identity is
    /// returned so the caller can close it (newest wins).
    pub fn install(&mut self, session: Arc<Session>) -> Option<Arc<Session>> {
        let node = session.node.clone();
        let evicted = self.sessions.insert(node.clone(), session);
        if evicted.is_some() {
            // Queues and routing entries of the old connection die with it.
            self.remove_subscriptions_of(&node);
        }
        evicted
    }

    pub fn add_subscription(&mut self, node: &str, sub: Subscription) {
        let key = (node.to_string(), sub.subscription_id);
        self.remove_subscription(node, sub.subscription_id);
        if sub.channel_pattern == "*" {
            self.wildcard.insert(key.clone());
        } else {
            self.exact
                .entry(sub.channel_pattern.clone())
                .or_default()
                .insert(key.clone());
        }
        self.by_node
            .entry(node.to_string())
            .or_default()
            .insert(sub.subscription_id);
        self.subs.insert(key, sub);
    }

    pub fn remove_subscription(&mut self, node: &str, sub_id: u64) -> bool {
        let key = (node.to_string(), sub_id);
        let Some(sub) = self.subs.remove(&key) else {
            return false;
        };
        if sub.channel_pattern == "*" {
            self.wildcard.remove(&key);
        } else if let Some(set) = self.exact.get_mut(&sub.channel_pattern) {
            set.remove(&key);
            if set.is_empty() {
                self.exact.remove(&sub.channel_pattern);
            }
        }
        if let Some(ids) = self.by_node.get_mut(node) {
            ids.remove(&sub_id);
            if ids.is_empty() {
                self.by_node.remove(node);
            }
        }
        true
    }

    fn remove_subscriptions_of(&mut self, node: &str) {
        let ids: Vec<u64> = self
            .by_node
            .get(node)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for id in ids {
            self.remove_subscription(node, id);
        }
    }

    /// Drops a session and all of its routing state. The caller closes the
    /// returned session outside the lock.
    pub fn remove_session(&mut self, node: &str, generation: u64) -> Option<Arc<Session>> {
        match self.sessions.get(node) {
            Some(s) if s.generation == generation => {}
            _ => return None,
        }
        let session = self.sessions.remove(node);
        self.remove_subscriptions_of(node);
        session
    }

    /// Destination sessions for an envelope published by `publisher_node`
    /// (the registered identity of the connection it arrived on, which is
    /// how self-delivery is suppressed even for re-injected traffic).
    pub fn route(&self, env: &MessageEnvelope, publisher_node: &str) -> Vec<Arc<Session>> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut dests = Vec::new();
        let exact = self.exact.get(&env.topic.channel);
        let candidates = exact
            .into_iter()
            .flatten()
            .chain(self.wildcard.iter());
        for (node, sub_id) in candidates {
            if seen.contains(node.as_str()) {
                continue;
            }
            let Some(sub) = self.subs.get(&(node.clone(), *sub_id)) else {
                continue;
            };
            if node == publisher_node && !sub.allow_self {
                continue;
            }
            if !sub.matches(env, node) {
                continue;
            }
            if let Some(session) = self.sessions.get(node) {
                seen.insert(node.as_str());
                dests.push(Arc::clone(session));
            }
        }
        dests
    }

    /// Sessions whose heartbeat deadline has passed; entries are removed
    /// from the core so the caller can close them unlocked.
    pub fn take_expired(&mut self, now: Instant) -> Vec<Arc<Session>> {
        let expired: Vec<(String, u64)> = self
            .sessions
            .values()
            .filter(|s| s.expired(now))
            .map(|s| (s.node.clone(), s.generation))
            .collect();
        let mut out = Vec::new();
        for (node, generation) in expired {
            if let Some(s) = self.remove_session(&node, generation) {
                out.push(s);
            }
        }
        out
    }

    pub fn all_sessions(&self) -> Vec<Arc<Session>> {
        self.sessions.values().cloned().collect()
    }

    pub fn subscriptions_of(&self, node: &str) -> Vec<Subscription> {
        self.by_node
            .get(node)
            .into_iter()
            .flatten()
            .filter_map(|id| self.subs.get(&(node.to_string(), *id)).cloned())
            .collect()
    }

    /// Forward/reverse index consistency check.
    pub fn audit(&self) -> Result<(), String> {
        for ((node, id), sub) in &self.subs {
            let fwd = if sub.channel_pattern == "*" {
                self.wildcard.contains(&(node.clone(), *id))
            } else {
                self.exact
                    .get(&sub.channel_pattern)
                    .map(|s| s.contains(&(node.clone(), *id)))
                    .unwrap_or(false)
            };
            if !fwd {
                return Err(format!("sub ({node},{id}) missing from forward index"));
            }
            if !self
                .by_node
                .get(node)
                .map(|ids| ids.contains(id))
                .unwrap_or(false)
            {
                return Err(format!("sub ({node},{id}) missing from reverse index"));
            }
            if !self.sessions.contains_key(node) {
                return Err(format!("sub ({node},{id}) for unknown session"));
            }
        }
        let fwd_count: usize = self.exact.values().map(BTreeSet::len).sum::<usize>()
            + self.wildcard.len();
        if fwd_count != self.subs.len() {
            return Err(format!(
                "forward index holds {fwd_count} entries, subs map holds {}",
                self.subs.len()
            ));
        }
        let rev_count: usize = self.by_node.values().map(BTreeSet::len).sum();
        if rev_count != self.subs.len() {
            return Err(format!(
                "reverse index holds {rev_count} entries, subs map holds {}",
                self.subs.len()
            ));
        }
        Ok(())
    }

    pub fn stats_json(&self, global: &super::GlobalStats) -> serde_json::Value {
        let sessions: Vec<serde_json::Value> = self
            .sessions
            .values()
            .map(|s| {
                let subs: Vec<serde_json::Value> = self
                    .subscriptions_of(&s.node)
                    .iter()
                    .map(|sub| {
                        serde_json::json!({
                            "id": sub.subscription_id,
                            "channel": sub.channel_pattern,
                            "region": match &sub.region_filter {
                                crate::wire::RegionFilter::Any => "any".to_string(),
                                crate::wire::RegionFilter::Is(r) => r.as_str().to_string(),
                            },
                            "scope": match sub.scope {
                                crate::wire::DeliveryScope::Standard => "standard",
                                crate::wire::DeliveryScope::DirectedOnly => "directed-only",
                                crate::wire::DeliveryScope::All => "all",
                            },
                            "allow_self": sub.allow_self,
                        })
                    })
                    .collect();
                serde_json::json!({
                    "node": s.node,
                    "delivered": s.stats.delivered.load(Ordering::Relaxed),
                    "dropped": s.stats.dropped.load(Ordering::Relaxed),
                    "batches": s.stats.batches.load(Ordering::Relaxed),
                    "enqueued": s.stats.enqueued.load(Ordering::Relaxed),
                    "queued": s.queued_now(),
                    "subscriptions": subs,
                })
            })
            .collect();
        // Global delivered/dropped hold retired-session totals; add the live ones.
        let live_delivered: u64 = self
            .sessions
            .values()
            .map(|s| s.stats.delivered.load(Ordering::Relaxed))
            .sum();
        let live_dropped: u64 = self
            .sessions
            .values()
            .map(|s| s.stats.dropped.load(Ordering::Relaxed))
            .sum();
        serde_json::json!({
            "broker": {
                "sessions": self.sessions.len(),
                "frames_rx": global.frames_rx.load(Ordering::Relaxed),
                "delivered": global.delivered.load(Ordering::Relaxed) + live_delivered,
                "dropped": global.dropped.load(Ordering::Relaxed) + live_dropped,
                "no_route": global.no_route.load(Ordering::Relaxed),
                "oversize": global.oversize.load(Ordering::Relaxed),
                "expired_sessions": global.expired_sessions.load(Ordering::Relaxed),
                "evicted_sessions": global.evicted_sessions.load(Ordering::Relaxed),
            },
            "sessions": sessions,
        })
    }
}
