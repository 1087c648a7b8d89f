//! Latency measurement: an open-loop paced publisher, a stamping
//! subscriber, and the harness that runs both as child processes against a
//! broker it supervises.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientOptions, SubscribeOptions};
use crate::clock::mono_ns;
use crate::transport::Endpoint;
use crate::wire::{Region as TopicRegion, TopicAddress};

use super::{percentiles, BenchError};

/// Payload prefix marking the end-of-run message.
const FIN_MARKER: &[u8] = b"ANCHOR-FIN";
/// Spin window at the end of each pacing sleep, tightening send times
/// without burning a core for the whole period.
const SPIN_NS: u64 = 100_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub payload_bytes: usize,
    pub rate_per_sec: u64,
    pub duration_s: f64,
    /// Samples whose send time falls inside the warmup window are excluded:
    /// max(10% of duration, 2 s), capped to half the duration.
    pub warmup_s: f64,
    pub channel: String,
    pub prio: u8,
}

impl LatencyConfig {
    pub fn new(payload_bytes: usize, rate_per_sec: u64, duration_s: f64) -> LatencyConfig {
        let warmup = (0.1 * duration_s).max(2.0).min(duration_s / 2.0);
        LatencyConfig {
            payload_bytes,
            rate_per_sec,
            duration_s,
            warmup_s: warmup,
            channel: "bench".into(),
            prio: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublisherSummary {
    pub sent: u64,
    pub start_mono_ns: u64,
    pub end_mono_ns: u64,
    pub achieved_rate: f64,
    pub target_rate: u64,
    /// Achieved within 5% of target.
    pub rate_ok: bool,
}

/// Open-loop paced publisher. Slot `i` is due at `start + i/rate`; a late
/// slot sends immediately but the schedule never moves, so there are no
/// compounding catch-up bursts.
pub fn latency_publisher(
    endpoint: &Endpoint,
    identity: &str,
    cfg: &LatencyConfig,
) -> Result<PublisherSummary, BenchError> {
    let client = Client::connect(ClientOptions::new(endpoint.clone(), identity));
    if !client.wait_registered(Duration::from_secs(10)) {
        return Err(BenchError::Harness("publisher could not register".into()));
    }
    let topic = TopicAddress::new(&cfg.channel, TopicRegion::Local, cfg.prio)
        .map_err(|e| BenchError::Harness(e.to_string()))?;
    let payload = vec![0x5A; cfg.payload_bytes];
    let total = (cfg.rate_per_sec as f64 * cfg.duration_s) as u64;
    let period_ns = 1_000_000_000u64 / cfg.rate_per_sec.max(1);

    let start = mono_ns();
    let mut sent = 0u64;
    for i in 0..total {
        let due = start + i * period_ns;
        pace_until(due);
        client
            .publish(&topic, &payload)
            .map_err(|e| BenchError::Harness(e.to_string()))?;
        sent += 1;
    }
    let end = mono_ns();

    // End-of-run markers at top priority; repeated since the bus is
    // at-most-once.
    let fin_topic = TopicAddress::new(&cfg.channel, TopicRegion::Local, 7)
        .map_err(|e| BenchError::Harness(e.to_string()))?;
    for _ in 0..5 {
        let _ = client.publish(&fin_topic, FIN_MARKER);
        std::thread::sleep(Duration::from_millis(20));
    }
    client.wait_drained(Duration::from_secs(5));
    client.shutdown();

    let elapsed_s = (end - start) as f64 / 1e9;
    let achieved = if elapsed_s > 0.0 { sent as f64 / elapsed_s } else { 0.0 };
    Ok(PublisherSummary {
        sent,
        start_mono_ns: start,
        end_mono_ns: end,
        achieved_rate: achieved,
        target_rate: cfg.rate_per_sec,
        rate_ok: achieved >= 0.95 * cfg.rate_per_sec as f64,
    })
}

fn pace_until(due_ns: u64) {
    loop {
        let now = mono_ns();
        if now >= due_ns {
            return;
        }
        let remaining = due_ns - now;
        if remaining > SPIN_NS {
            std::thread::sleep(Duration::from_nanos(remaining - SPIN_NS));
        } else {
            std::hint::spin_loop();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubscriberSummary {
    pub received: u64,
    pub first_recv_ns: u64,
    pub last_recv_ns: u64,
}

/// Subscribes and stamps `now - ts` per delivery until the FIN marker (or
/// an idle timeout) ends the run, then writes one `recv_ns,latency_ns` CSV
/// row per sample.
pub fn latency_subscriber(
    endpoint: &Endpoint,
    identity: &str,
    channel: &str,
    samples_csv: &Path,
    idle_timeout: Duration,
    mut ready: Option<&mut dyn Write>,
) -> Result<SubscriberSummary, BenchError> {
    use parking_lot::Mutex;
    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::Arc;

    let client = Client::connect(ClientOptions::new(endpoint.clone(), identity));
    let samples: Arc<Mutex<Vec<(u64, u64)>>> = Arc::new(Mutex::new(Vec::with_capacity(1 << 20)));
    let done = Arc::new(AtomicBool::new(false));
    let last_rx = Arc::new(AtomicU64::new(mono_ns()));
    {
        let samples = Arc::clone(&samples);
        let done = Arc::clone(&done);
        let last_rx = Arc::clone(&last_rx);
        client
            .subscribe(channel, SubscribeOptions::default(), move |env| {
                let now = mono_ns();
                last_rx.store(now, Ordering::Relaxed);
                if env.payload.starts_with(FIN_MARKER) {
                    done.store(true, Ordering::SeqCst);
                    return;
                }
                samples.lock().push((now, now.saturating_sub(env.ts_monotonic_ns)));
            })
            .map_err(|e| BenchError::Harness(e.to_string()))?;
    }
    if !client.wait_registered(Duration::from_secs(10)) {
        return Err(BenchError::Harness("subscriber could not register".into()));
    }
    if let Some(w) = ready.as_deref_mut() {
        // Handshake line for the harness: subscription is live.
        let _ = writeln!(w, "READY");
        let _ = w.flush();
    }

    while !done.load(std::sync::atomic::Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(10));
        let idle = mono_ns().saturating_sub(last_rx.load(std::sync::atomic::Ordering::Relaxed));
        if Duration::from_nanos(idle) > idle_timeout {
            break;
        }
    }
    client.shutdown();

    let samples = samples.lock();
    let mut out = String::with_capacity(samples.len() * 24 + 32);
    out.push_str("recv_ns,latency_ns\n");
    for (recv, lat) in samples.iter() {
        out.push_str(&format!("{recv},{lat}\n"));
    }
    std::fs::write(samples_csv, out)?;
    Ok(SubscriberSummary {
        received: samples.len() as u64,
        first_recv_ns: samples.first().map(|s| s.0).unwrap_or(0),
        last_recv_ns: samples.last().map(|s| s.0).unwrap_or(0),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRun {
    pub config: LatencyConfig,
    pub samples: u64,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub achieved_rate: f64,
    /// Rate within 5% of target and enough samples to be meaningful.
    pub valid: bool,
    pub samples_csv: PathBuf,
}

/// Runs one full measurement: broker, subscriber and publisher as separate
/// processes (`exe` is this CLI binary), results gathered from files.
pub fn run_latency(
    exe: &Path,
    cfg: &LatencyConfig,
    out_dir: &Path,
    label: &str,
) -> Result<LatencyRun, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let port = super::reserve_port()?;
    let endpoint = format!("127.0.0.1:{port}");
    let samples_csv = out_dir.join(format!("{label}-samples.csv"));
    let pub_json = out_dir.join(format!("{label}-publisher.json"));

    let mut broker = spawn(
        exe,
        &["broker", "--listen", &endpoint],
        Stdio::null(),
    )?;
    let result = (|| -> Result<LatencyRun, BenchError> {
        super::wait_port(&endpoint, Duration::from_secs(10))?;

        let idle_timeout_s = format!("{}", (cfg.duration_s * 2.0 + 30.0) as u64);
        let mut sub = spawn(
            exe,
            &[
                "bench",
                "latency-sub",
                "--endpoint",
                &endpoint,
                "--channel",
                &cfg.channel,
                "--out",
                samples_csv.to_str().unwrap(),
                "--idle-timeout-s",
                &idle_timeout_s,
            ],
            Stdio::piped(),
        )?;
        // Wait for the subscription to be live before pacing begins.
        {
            let stdout = sub.stdout.take().ok_or_else(|| {
                BenchError::Harness("subscriber stdout unavailable".into())
            })?;
            let mut lines = BufReader::new(stdout).lines();
            let deadline = Instant::now() + Duration::from_secs(10);
            loop {
                if let Some(Ok(line)) = lines.next() {
                    if line.trim() == "READY" {
                        break;
                    }
                } else if Instant::now() > deadline {
                    let _ = sub.kill();
                    return Err(BenchError::Harness("subscriber never became ready".into()));
                }
            }
            // Keep draining in the background so the child never blocks on
            // a full pipe.
            std::thread::spawn(move || for _ in lines {});
        }

        let mut publisher = spawn(
            exe,
            &[
                "bench",
                "latency-pub",
                "--endpoint",
                &endpoint,
                "--channel",
                &cfg.channel,
                "--payload",
                &cfg.payload_bytes.to_string(),
                "--rate",
                &cfg.rate_per_sec.to_string(),
                "--duration-s",
                &cfg.duration_s.to_string(),
                "--prio",
                &cfg.prio.to_string(),
                "--out",
                pub_json.to_str().unwrap(),
            ],
            Stdio::null(),
        )?;
        let pub_status = publisher.wait()?;
        if !pub_status.success() {
            let _ = sub.kill();
            return Err(BenchError::Harness(format!("publisher exited with {pub_status}")));
        }
        let sub_status = sub.wait()?;
        if !sub_status.success() {
            return Err(BenchError::Harness(format!("subscriber exited with {sub_status}")));
        }

        let pub_summary: PublisherSummary =
            serde_json::from_slice(&std::fs::read(&pub_json)?)
                .map_err(|e| BenchError::Harness(format!("publisher summary: {e}")))?;
        let all = load_samples(&samples_csv)?;

        // Warmup exclusion by send time.
        let cutoff = pub_summary.start_mono_ns + (cfg.warmup_s * 1e9) as u64;
        let kept: Vec<u64> = all
            .iter()
            .filter(|(recv, lat)| recv.saturating_sub(*lat) >= cutoff)
            .map(|(_, lat)| *lat)
            .collect();
        if kept.is_empty() {
            return Err(BenchError::Harness("no samples after warmup".into()));
        }
        let pcts = percentiles(&kept, &[50.0, 90.0, 99.0])
            .map_err(|e| BenchError::Harness(e.to_string()))?;
        if !pub_summary.rate_ok {
            return Err(BenchError::RateUnachievable {
                target: cfg.rate_per_sec,
                achieved: pub_summary.achieved_rate,
            });
        }
        Ok(LatencyRun {
            config: cfg.clone(),
            samples: kept.len() as u64,
            p50_ns: pcts[0],
            p90_ns: pcts[1],
            p99_ns: pcts[2],
            achieved_rate: pub_summary.achieved_rate,
            valid: true,
            samples_csv: samples_csv.clone(),
        })
    })();
    let _ = broker.kill();
    let _ = broker.wait();

    if let Ok(run) = &result {
        let summary_path = out_dir.join(format!("{label}-summary.json"));
        std::fs::write(&summary_path, serde_json::to_vec_pretty(run)?)?;
    }
    result
}

pub fn load_samples(path: &Path) -> Result<Vec<(u64, u64)>, BenchError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let Some((recv, lat)) = line.split_once(',') else {
            continue;
        };
        if let (Ok(r), Ok(l)) = (recv.trim().parse(), lat.trim().parse()) {
            out.push((r, l));
        }
    }
    Ok(out)
}

fn spawn(exe: &Path, args: &[&str], stdout: Stdio) -> Result<Child, BenchError> {
    Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .stdout(stdout)
        .spawn()
        .map_err(|e| BenchError::Harness(format!("spawn {args:?}: {e}")))
}

/// The paper-style grid: {128 B, 1024 B} x {1000, 5000} msg/s, repeated and
/// interleaved round-robin so machine drift hits every configuration alike.
pub const GRID: [(usize, u64); 4] = [(128, 1000), (128, 5000), (1024, 1000), (1024, 5000)];

#[derive(Debug, Serialize, Deserialize)]
pub struct GridSummary {
    pub duration_s: f64,
    pub reps: usize,
    pub runs: Vec<LatencyRun>,
    /// Median of per-rep percentiles for each grid config, in GRID order.
    pub median_p50_ns: Vec<u64>,
    pub median_p90_ns: Vec<u64>,
    pub median_p99_ns: Vec<u64>,
}

pub fn run_grid(
    exe: &Path,
    duration_s: f64,
    reps: usize,
    out_dir: &Path,
) -> Result<GridSummary, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let mut runs: Vec<LatencyRun> = Vec::new();
    for rep in 0..reps {
        for (i, (payload, rate)) in GRID.iter().enumerate() {
            let cfg = LatencyConfig::new(*payload, *rate, duration_s);
            let label = format!("grid-c{i}-{payload}b-{rate}mps-rep{rep}");
            let run = run_latency(exe, &cfg, out_dir, &label)?;
            log::info!(
                "{label}: n={} p50={}us p90={}us p99={}us rate={:.1}/s",
                run.samples,
                run.p50_ns / 1000,
                run.p90_ns / 1000,
                run.p99_ns / 1000,
                run.achieved_rate
            );
            runs.push(run);
        }
    }
    let median_for = |pick: fn(&LatencyRun) -> u64| -> Vec<u64> {
        GRID.iter()
            .enumerate()
            .map(|(i, (payload, rate))| {
                let mut vals: Vec<u64> = runs
                    .iter()
                    .filter(|r| r.config.payload_bytes == *payload && r.config.rate_per_sec == *rate)
                    .map(pick)
                    .collect();
                vals.sort_unstable();
                let _ = i;
                vals[vals.len() / 2]
            })
            .collect()
    };
    let summary = GridSummary {
        duration_s,
        reps,
        median_p50_ns: median_for(|r| r.p50_ns),
        median_p90_ns: median_for(|r| r.p90_ns),
        median_p99_ns: median_for(|r| r.p99_ns),
        runs,
    };
    std::fs::write(
        out_dir.join("grid-summary.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    Ok(summary)
}
