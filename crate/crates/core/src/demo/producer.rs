//! Upstream preprocessing: parse, clean, normalize, window, aggregate,
//! write records.
//!
//! Observations arrive as text lines (`v=<float>`, the synthetic source
//! format). Parsing or non-finite values are counted and skipped, never
//! fatal. Normalized values enter a sliding window of size W; once the
//! window spans W the aggregates are written into the ingestion-owned
//! record group and the window slides by one (or clears, in tumbling mode).

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clock::mono_ns;
use crate::record::{EntryKind, GroupValues, Region, ReplayLogWriter, WriterRole};

use super::{group_names, DemoConfig, DemoError, ProducerLogBody};

/// Window aggregates over normalized features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

/// Sliding (or tumbling) window buffer. Aggregates are recomputed over the
/// buffer contents at every emission, so they always equal a brute-force
/// recomputation by construction; the run audit still cross-checks them
/// from the observation log.
pub struct WindowState {
    buf: std::collections::VecDeque<f64>,
    capacity: usize,
    tumbling: bool,
}

impl WindowState {
    pub fn new(capacity: usize, tumbling: bool) -> WindowState {
        assert!(capacity >= 1, "window must hold at least one observation");
        WindowState {
            buf: std::collections::VecDeque::with_capacity(capacity),
            capacity,
            tumbling,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn contents(&self) -> Vec<f64> {
        self.buf.iter().copied().collect()
    }

    /// Appends one normalized observation; returns aggregates when the
    /// window spans its capacity, evicting per the window mode.
    pub fn push(&mut self, value: f64) -> Option<Aggregates> {
        self.buf.push_back(value);
        if self.buf.len() < self.capacity {
            return None;
        }
        let agg = aggregate(self.buf.iter().copied());
        if self.tumbling {
            self.buf.clear();
        } else {
            self.buf.pop_front();
        }
        Some(agg)
    }
}

/// Mean/min/max/count over an observation window.
pub fn aggregate(values: impl Iterator<Item = f64>) -> Aggregates {
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut count = 0u64;
    for v in values {
        sum += v;
        min = min.min(v);
        max = max.max(v);
        count += 1;
    }
    Aggregates {
        mean: sum / count as f64,
        min,
        max,
        count,
    }
}

/// Parse stage: decode the `v=<float>` source format.
pub fn parse_observation(raw: &str) -> Option<f64> {
    raw.trim().strip_prefix("v=")?.parse::<f64>().ok()
}

/// Normalize stage: affine map of `[raw_min, raw_max]` onto `[0, 1]`,
/// clamped.
pub fn normalize(value: f64, raw_min: f64, raw_max: f64) -> f64 {
    if raw_max <= raw_min {
        return 0.0;
    }
    ((value - raw_min) / (raw_max - raw_min)).clamp(0.0, 1.0)
}

/// Seeded synthetic observation source: a bounded random walk rendered in
/// the `v=` line format, with an optional malformed line every n-th
/// observation to exercise the clean stage.
pub fn synthetic_observations(cfg: &DemoConfig) -> impl Iterator<Item = String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.observation_seed);
    let (lo, hi, step) = (cfg.raw_min, cfg.raw_max, cfg.walk_step);
    let malformed_every = cfg.malformed_every;
    let mut x = (lo + hi) / 2.0;
    let mut n = 0u64;
    std::iter::from_fn(move || {
        n += 1;
        if malformed_every > 0 && n % malformed_every == 0 {
            return Some("v=NaN".to_string());
        }
        let delta = rng.gen_range(-step..=step);
        x = (x + delta).clamp(lo, hi);
        Some(format!("v={x:.6}"))
    })
}

#[derive(Debug, Default, Clone)]
pub struct ProducerStats {
    pub observations: u64,
    pub skipped: u64,
    pub writes: u64,
}

/// Blocking producer loop; returns when `stop` is set.
pub fn run_producer(cfg: &DemoConfig, stop: &AtomicBool) -> Result<ProducerStats, DemoError> {
    std::fs::create_dir_all(&cfg.log_dir)?;
    let mut region = Region::open_writer(&cfg.region_path, WriterRole::Ingestion)?;
    let mut log = ReplayLogWriter::create(&cfg.producer_log())?;
    let groups = group_names(&cfg.project.project_id);
    let mut window = WindowState::new(cfg.window, cfg.tumbling);
    let mut stats = ProducerStats::default();
    let pace = Duration::from_millis(cfg.observation_interval_ms.max(1));

    for raw in synthetic_observations(cfg) {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        stats.observations += 1;
        let parsed = parse_observation(&raw);
        let value = match parsed {
            Some(v) if v.is_finite() => normalize(v, cfg.raw_min, cfg.raw_max),
            _ => {
                stats.skipped += 1;
                log.append(
                    EntryKind::RecordWrite,
                    mono_ns(),
                    &serde_json::to_vec(&ProducerLogBody::ObservationSkipped { raw })?,
                )?;
                std::thread::sleep(pace);
                continue;
            }
        };
        log.append(
            EntryKind::RecordWrite,
            mono_ns(),
            &serde_json::to_vec(&ProducerLogBody::Observation { value })?,
        )?;
        if let Some(agg) = window.push(value) {
            region.write_group(
                &groups.obs_agg,
                &GroupValues::F64(vec![agg.mean, agg.min, agg.max, agg.count as f64]),
            )?;
            stats.writes += 1;
            log.append(
                EntryKind::RecordWrite,
                mono_ns(),
                &serde_json::to_vec(&ProducerLogBody::AggregateWrite {
                    mean: agg.mean,
                    min: agg.min,
                    max: agg.max,
                    count: agg.count,
                })?,
            )?;
        }
        std::thread::sleep(pace);
    }
    Ok(stats)
}
