//! Crash-and-restart experiment: steady load, a hard broker kill with
//! deletion of its shared on-disk state, a cold restart after a configured
//! downtime, and a binned delivered-throughput trace around the whole
//! sequence. Clients recover exclusively through their own state machines;
//! the harness only manages the broker process.

use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientOptions, SubscribeOptions};
use crate::clock::mono_ns;
use crate::transport::Endpoint;

use super::latency::load_samples;
use super::BenchError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub payload_bytes: usize,
    pub rate_per_sec: u64,
    /// Steady phase before the kill.
    pub kill_after_s: f64,
    /// How long the broker stays down.
    pub downtime_s: f64,
    /// Observation window after the restart.
    pub post_restart_s: f64,
    pub bin_width_s: f64,
    pub channel: String,
}

impl RecoveryConfig {
    pub fn new(rate_per_sec: u64, payload_bytes: usize, kill_after_s: f64, downtime_s: f64) -> Self {
        RecoveryConfig {
            payload_bytes,
            rate_per_sec,
            kill_after_s,
            downtime_s,
            post_restart_s: 15.0,
            bin_width_s: 0.5,
            channel: "bench".into(),
        }
    }

    pub fn total_duration_s(&self) -> f64 {
        self.kill_after_s + self.downtime_s + self.post_restart_s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bin {
    pub start_ns: u64,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputTrace {
    pub config: RecoveryConfig,
    pub bins: Vec<Bin>,
    pub kill_ns: u64,
    pub restart_ns: u64,
    /// First bin at or above 90% of steady throughput sustained for three
    /// consecutive bins after the restart; None when it never recovered.
    pub recovered_ns: Option<u64>,
    pub steady_mean_per_bin: f64,
    pub publisher_sent: u64,
    pub subscriber_received: u64,
    /// Subscription audit after recovery: the subscriber's subscriptions as
    /// re-registered on the restarted broker.
    pub resubscribed_channels: Vec<String>,
}

impl ThroughputTrace {
    /// Bin counts covering the interval [kill, restart] must all be zero.
    pub fn downtime_is_silent(&self) -> bool {
        self.bins
            .iter()
            .filter(|b| {
                let end = b.start_ns + (self.config.bin_width_s * 1e9) as u64;
                b.start_ns >= self.kill_ns && end <= self.restart_ns
            })
            .all(|b| b.count == 0)
    }

    /// There is exactly one contiguous run of zero bins, and it covers the
    /// downtime window.
    pub fn single_zero_interval(&self) -> bool {
        let zero_runs: Vec<(usize, usize)> = {
            let mut runs = Vec::new();
            let mut start: Option<usize> = None;
            for (i, b) in self.bins.iter().enumerate() {
                if b.count == 0 {
                    start.get_or_insert(i);
                } else if let Some(s) = start.take() {
                    runs.push((s, i - 1));
                }
            }
            if let Some(s) = start {
                runs.push((s, self.bins.len() - 1));
            }
            runs
        };
        // Ignore partial silence at the very edges of the trace (before the
        // publisher started or after it stopped).
        let significant: Vec<_> = zero_runs
            .iter()
            .filter(|(s, e)| {
                let run_start = self.bins[*s].start_ns;
                let run_end =
                    self.bins[*e].start_ns + (self.config.bin_width_s * 1e9) as u64;
                run_end > self.kill_ns.saturating_sub(1) && run_start < self.restart_ns + 2_000_000_000
            })
            .collect();
        significant.len() == 1
    }
}

/// Runs the full experiment. `exe` is this CLI binary (used to spawn the
/// broker); publisher and subscriber run in-process on their own threads,
/// which keeps the measurement machinery out of the killed process tree.
pub fn run_recovery(
    exe: &Path,
    cfg: &RecoveryConfig,
    out_dir: &Path,
    backoff_cap_hint: Duration,
) -> Result<ThroughputTrace, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let port = super::reserve_port()?;
    let endpoint_s = format!("127.0.0.1:{port}");
    let endpoint = Endpoint::parse(&endpoint_s)?;
    let state_region: PathBuf = out_dir.join("broker-state.anchor");
    let samples_csv = out_dir.join("recovery-samples.csv");

    let spawn_broker = || -> Result<std::process::Child, BenchError> {
        std::process::Command::new(exe)
            .args([
                "broker",
                "--listen",
                &endpoint_s,
                "--state-region",
                state_region.to_str().unwrap(),
            ])
            .stdin(Stdio::null())
            .spawn()
            .map_err(|e| BenchError::Harness(format!("spawn broker: {e}")))
    };

    let mut broker = spawn_broker()?;
    super::wait_port(&endpoint_s, Duration::from_secs(10))?;

    // Subscriber thread: stamps receive times; the bins fall out afterwards.
    let total = cfg.total_duration_s();
    let sub_csv = samples_csv.clone();
    let sub_endpoint = endpoint.clone();
    let sub_channel = cfg.channel.clone();
    let sub_thread = std::thread::spawn(move || {
        super::latency::latency_subscriber(
            &sub_endpoint,
            "bench-sub",
            &sub_channel,
            &sub_csv,
            Duration::from_secs_f64(total + 30.0),
            None,
        )
    });

    // Publisher thread: paced open-loop for the whole experiment, broker
    // death included (publish never blocks).
    let pub_cfg = super::latency::LatencyConfig {
        payload_bytes: cfg.payload_bytes,
        rate_per_sec: cfg.rate_per_sec,
        duration_s: total,
        warmup_s: 0.0,
        channel: cfg.channel.clone(),
        prio: 3,
    };
    let pub_endpoint = endpoint.clone();
    let pub_thread = std::thread::spawn(move || {
        super::latency::latency_publisher(&pub_endpoint, "bench-pub", &pub_cfg)
    });

    // Kill: forcible termination plus deletion of the broker's on-disk
    // shared state, emulating a cold restart with shared-memory loss.
    std::thread::sleep(Duration::from_secs_f64(cfg.kill_after_s));
    let kill_ns = mono_ns();
    broker.kill().map_err(|e| BenchError::Harness(format!("kill broker: {e}")))?;
    let _ = broker.wait();
    let _ = std::fs::remove_file(&state_region);
    log::info!("broker killed at t={:.1}s, state region deleted", cfg.kill_after_s);

    std::thread::sleep(Duration::from_secs_f64(cfg.downtime_s));
    let mut broker2 = spawn_broker()?;
    let restart_ns = mono_ns();
    super::wait_port(&endpoint_s, Duration::from_secs(10))?;
    log::info!("broker restarted after {:.1}s downtime", cfg.downtime_s);

    let pub_summary = pub_thread
        .join()
        .map_err(|_| BenchError::Harness("publisher thread panicked".into()))?
        ?;
    let sub_summary = sub_thread
        .join()
        .map_err(|_| BenchError::Harness("subscriber thread panicked".into()))?
        ?;

    // Subscription-convergence audit against the restarted broker.
    let resubscribed = stats_subscriptions(&endpoint, "bench-sub", backoff_cap_hint)?;

    let _ = broker2.kill();
    let _ = broker2.wait();

    // Build the trace from receive stamps.
    let samples = load_samples(&samples_csv)?;
    let bin_ns = (cfg.bin_width_s * 1e9) as u64;
    let t0 = pub_summary.start_mono_ns;
    let horizon = t0 + (total * 1e9) as u64;
    let n_bins = ((horizon - t0) / bin_ns + 1) as usize;
    let mut bins = vec![0u64; n_bins];
    for (recv, _) in &samples {
        if *recv >= t0 && *recv < horizon {
            bins[((recv - t0) / bin_ns) as usize] += 1;
        }
    }
    let bins: Vec<Bin> = bins
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            start_ns: t0 + i as u64 * bin_ns,
            count,
        })
        .collect();

    // Steady throughput: bins fully inside [t0 + 2s, kill).
    let steady: Vec<u64> = bins
        .iter()
        .filter(|b| b.start_ns >= t0 + 2_000_000_000 && b.start_ns + bin_ns <= kill_ns)
        .map(|b| b.count)
        .collect();
    if steady.is_empty() {
        return Err(BenchError::Harness("no steady-phase bins before the kill".into()));
    }
    let steady_mean = steady.iter().sum::<u64>() as f64 / steady.len() as f64;

    // Recovery point: >= 90% of steady sustained for 3 consecutive bins.
    let threshold = 0.9 * steady_mean;
    let mut recovered_ns = None;
    let after_restart: Vec<&Bin> = bins.iter().filter(|b| b.start_ns >= restart_ns).collect();
    for w in after_restart.windows(3) {
        if w.iter().all(|b| b.count as f64 >= threshold) {
            recovered_ns = Some(w[0].start_ns);
            break;
        }
    }

    let trace = ThroughputTrace {
        config: cfg.clone(),
        bins,
        kill_ns,
        restart_ns,
        recovered_ns,
        steady_mean_per_bin: steady_mean,
        publisher_sent: pub_summary.sent,
        subscriber_received: sub_summary.received,
        resubscribed_channels: resubscribed,
    };
    std::fs::write(
        out_dir.join("recovery-trace.json"),
        serde_json::to_vec_pretty(&trace)?,
    )?;
    let mut csv = String::from("bin_start_ns,count\n");
    for b in &trace.bins {
        csv.push_str(&format!("{},{}\n", b.start_ns, b.count));
    }
    std::fs::write(out_dir.join("recovery-bins.csv"), csv)?;
    Ok(trace)
}

/// Queries the broker's stats channel and returns the channels the given
/// node is subscribed to, retrying until the node has re-registered (bounded
/// by the client backoff cap plus a margin).
pub fn stats_subscriptions(
    endpoint: &Endpoint,
    node: &str,
    backoff_cap: Duration,
) -> Result<Vec<String>, BenchError> {
    let deadline = Instant::now() + backoff_cap + Duration::from_secs(5);
    loop {
        let dump = super::stats_query(endpoint, Duration::from_secs(5))?;
        let subs: Vec<String> = dump["sessions"]
            .as_array()
            .into_iter()
            .flatten()
            .filter(|s| s["node"] == node)
            .flat_map(|s| {
                s["subscriptions"]
                    .as_array()
                    .cloned()
                    .unwrap_or_default()
                    .into_iter()
                    .filter_map(|sub| sub["channel"].as_str().map(str::to_string))
            })
            .collect();
        if !subs.is_empty() {
            return Ok(subs);
        }
        if Instant::now() > deadline {
            return Ok(Vec::new());
        }
        std::thread::sleep(Duration::from_millis(200));
    }
}

/// One-shot stats request over a throwaway client.
pub fn stats_query_impl(
    endpoint: &Endpoint,
    timeout: Duration,
) -> Result<serde_json::Value, BenchError> {
    use parking_lot::Mutex;
    use std::sync::Arc;

    let id = format!("statsq-{}", std::process::id());
    let client = Client::connect(ClientOptions::new(endpoint.clone(), &id));
    let result: Arc<Mutex<Option<serde_json::Value>>> = Arc::new(Mutex::new(None));
    {
        let result = Arc::clone(&result);
        client
            .subscribe(
                crate::broker::STATS_CHANNEL,
                SubscribeOptions::default(),
                move |env| {
                    if let Ok(v) = serde_json::from_slice(&env.payload) {
                        *result.lock() = Some(v);
                    }
                },
            )
            .map_err(|e| BenchError::Harness(e.to_string()))?;
    }
    if !client.wait_registered(timeout) {
        return Err(BenchError::Harness("stats query could not register".into()));
    }
    let topic = crate::wire::TopicAddress::new(
        crate::broker::STATS_REQUEST_CHANNEL,
        crate::wire::Region::Local,
        7,
    )
    .map_err(|e| BenchError::Harness(e.to_string()))?;
    client
        .publish(&topic, b"")
        .map_err(|e| BenchError::Harness(e.to_string()))?;
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = result.lock().take() {
            client.shutdown();
            return Ok(v);
        }
        if Instant::now() > deadline {
            client.shutdown();
            return Err(BenchError::Harness("no stats response".into()));
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}
