//! Cross-cluster bridging.
//!
//! A gateway link joins two clusters with a pair of ordinary bus clients,
//! one registered with each master, so it inherits the client's reconnect
//! and re-registration machinery for free. Each direction subscribes to
//! non-local traffic (scope `All`, so directed messages for remote nodes
//! cross too) and re-injects matching envelopes into the opposite cluster
//! with the hop count bumped and publisher identity preserved.
//!
//! Loop suppression is two layered guards: a hop-count ceiling, and a
//! dedupe window of `(publisher, channel, seq)` triples shared by both
//! directions of a link. The shared window is what stops the two-client
//! ring: the copy a link injects into cluster B comes right back to its
//! B-side subscription, hits the window, and dies there instead of
//! re-entering cluster A.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::client::{Client, ClientOptions, PublishOutcome, SubscribeOptions};
use crate::transport::Endpoint;
use crate::wire::{DeliveryScope, MessageEnvelope, Region, RegionFilter};

/// Default dedupe window entries per link.
pub const DEFAULT_DEDUPE_CAPACITY: usize = 65536;
/// Default gateway traversal ceiling.
pub const DEFAULT_MAX_HOPS: u8 = 4;

/// Bounded memory of recently forwarded messages (LRU by insertion).
pub struct DedupeWindow {
    seen: HashSet<(String, String, u64)>,
    order: VecDeque<(String, String, u64)>,
    capacity: usize,
}

impl DedupeWindow {
    pub fn new(capacity: usize) -> DedupeWindow {
        DedupeWindow {
            seen: HashSet::new(),
            order: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    /// True when the triple was absent; it is recorded either way, evicting
    /// the oldest entry at capacity.
    pub fn test_and_insert(&mut self, publisher: &str, channel: &str, seq: u64) -> bool {
        let key = (publisher.to_string(), channel.to_string(), seq);
        if self.seen.contains(&key) {
            return false;
        }
        if self.order.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(key.clone());
        self.seen.insert(key);
        true
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Why an envelope was not forwarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardVerdict {
    Forward,
    LocalScope,
    HopLimit,
    Duplicate,
}

/// The forwarding decision. Recording in the dedupe window happens here, so
/// offering the same envelope twice answers `Duplicate` the second time.
pub fn should_forward(
    env: &MessageEnvelope,
    max_hops: u8,
    window: &Mutex<DedupeWindow>,
) -> ForwardVerdict {
    if env.topic.region == Region::Local {
        return ForwardVerdict::LocalScope;
    }
    if env.hop_count >= max_hops {
        return ForwardVerdict::HopLimit;
    }
    if !window
        .lock()
        .test_and_insert(&env.publisher_id, &env.topic.channel, env.seq)
    {
        return ForwardVerdict::Duplicate;
    }
    ForwardVerdict::Forward
}

/// One bidirectional bridge between two clusters.
#[derive(Debug, Clone)]
pub struct LinkConfig {
    pub name: String,
    pub a: Endpoint,
    pub b: Endpoint,
    /// Named regions carried over this link; `global` always crosses.
    pub regions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub gateway_id: String,
    pub links: Vec<LinkConfig>,
    pub dedupe_capacity: usize,
    pub max_hops: u8,
    /// Options template for the underlying clients (endpoint and identity
    /// are overwritten per side).
    pub client_template: Option<ClientOptions>,
}

impl GatewayConfig {
    pub fn new(gateway_id: &str) -> GatewayConfig {
        GatewayConfig {
            gateway_id: gateway_id.to_string(),
            links: Vec::new(),
            dedupe_capacity: DEFAULT_DEDUPE_CAPACITY,
            max_hops: DEFAULT_MAX_HOPS,
            client_template: None,
        }
    }
}

#[derive(Default)]
pub struct LinkStats {
    pub forwarded: AtomicU64,
    pub suppressed_local: AtomicU64,
    pub suppressed_hops: AtomicU64,
    pub suppressed_duplicate: AtomicU64,
    pub inject_failures: AtomicU64,
}

pub struct LinkRuntime {
    pub name: String,
    side_a: Arc<Client>,
    side_b: Arc<Client>,
    pub stats: Arc<LinkStats>,
    pub window: Arc<Mutex<DedupeWindow>>,
}

pub struct Gateway {
    links: Vec<LinkRuntime>,
}

impl Gateway {
    pub fn start(config: GatewayConfig) -> Gateway {
        let mut links = Vec::new();
        for link in &config.links {
            links.push(start_link(&config, link));
        }
        Gateway { links }
    }

    pub fn links(&self) -> &[LinkRuntime] {
        &self.links
    }

    /// True once every underlying client is registered with its cluster.
    pub fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        for l in &self.links {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if !l.side_a.wait_registered(left) {
                return false;
            }
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if !l.side_b.wait_registered(left) {
                return false;
            }
        }
        true
    }

    pub fn shutdown(&self) {
        for l in &self.links {
            l.side_a.shutdown();
            l.side_b.shutdown();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn client_for(config: &GatewayConfig, endpoint: &Endpoint, identity: String) -> Arc<Client> {
    let mut opts = match &config.client_template {
        Some(t) => {
            let mut t = t.clone();
            t.endpoint = endpoint.clone();
            t.identity = identity;
            t
        }
        None => ClientOptions::new(endpoint.clone(), &identity),
    };
    // Gateways relay bursts; keep a roomier local queue than the default.
    opts.send_queue_capacity = opts.send_queue_capacity.max(8192);
    Client::connect(opts)
}

fn start_link(config: &GatewayConfig, link: &LinkConfig) -> LinkRuntime {
    let window = Arc::new(Mutex::new(DedupeWindow::new(config.dedupe_capacity)));
    let stats = Arc::new(LinkStats::default());

    let side_a = client_for(
        config,
        &link.a,
        format!("{}-{}-a", config.gateway_id, link.name),
    );
    let side_b = client_for(
        config,
        &link.b,
        format!("{}-{}-b", config.gateway_id, link.name),
    );

    // a -> b
    wire_direction(
        &side_a,
        Arc::clone(&side_b),
        link,
        config.max_hops,
        Arc::clone(&window),
        Arc::clone(&stats),
    );
    // b -> a
    wire_direction(
        &side_b,
        Arc::clone(&side_a),
        link,
        config.max_hops,
        Arc::clone(&window),
        Arc::clone(&stats),
    );

    LinkRuntime {
        name: link.name.clone(),
        side_a,
        side_b,
        stats,
        window,
    }
}

/// Subscribes `from` to every region this link carries and re-injects
/// matching envelopes through `to`.
fn wire_direction(
    from: &Arc<Client>,
    to: Arc<Client>,
    link: &LinkConfig,
    max_hops: u8,
    window: Arc<Mutex<DedupeWindow>>,
    stats: Arc<LinkStats>,
) {
    let mut filters = vec![RegionFilter::Is(Region::Global)];
    for region in &link.regions {
        filters.push(RegionFilter::Is(Region::Named(region.clone())));
    }
    for filter in filters {
        let to = Arc::clone(&to);
        let window = Arc::clone(&window);
        let stats = Arc::clone(&stats);
        let opts = SubscribeOptions {
            region_filter: filter,
            scope: DeliveryScope::All,
            allow_self: false,
        };
        from.subscribe("*", opts, move |env| {
            forward(env, &to, max_hops, &window, &stats);
        })
        .expect("gateway subscription pattern is valid");
    }
}

fn forward(
    env: &MessageEnvelope,
    to: &Arc<Client>,
    max_hops: u8,
    window: &Mutex<DedupeWindow>,
    stats: &LinkStats,
) {
    match should_forward(env, max_hops, window) {
        ForwardVerdict::Forward => {}
        ForwardVerdict::LocalScope => {
            stats.suppressed_local.fetch_add(1, Ordering::Relaxed);
            return;
        }
        ForwardVerdict::HopLimit => {
            stats.suppressed_hops.fetch_add(1, Ordering::Relaxed);
            return;
        }
        ForwardVerdict::Duplicate => {
            stats.suppressed_duplicate.fetch_add(1, Ordering::Relaxed);
            return;
        }
    }
    let mut out = env.clone();
    out.hop_count += 1;
    match to.publish_envelope(out) {
        Ok(PublishOutcome::Accepted) | Ok(PublishOutcome::DroppedLocal) => {
            stats.forwarded.fetch_add(1, Ordering::Relaxed);
        }
        Err(e) => {
            stats.inject_failures.fetch_add(1, Ordering::Relaxed);
            log::warn!("gateway re-inject failed: {e}");
        }
    }
}
