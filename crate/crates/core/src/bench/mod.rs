//! Benchmark harness: latency distributions over a payload x rate grid, and
//! the crash-and-restart throughput trace. Results land in machine-readable
//! CSV and JSON (`docs/bench.md` documents the schemas).

mod latency;
mod recovery;
mod stats;

pub use latency::{
    latency_publisher, latency_subscriber, load_samples, run_grid, run_latency, GridSummary,
    LatencyConfig, LatencyRun, PublisherSummary, SubscriberSummary, GRID,
};
pub use recovery::{
    run_recovery, stats_subscriptions, Bin, RecoveryConfig, ThroughputTrace,
};
pub use stats::{ecdf, p50_p90_p99, percentiles, StatsError};

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no samples")]
    EmptySamples,
    #[error("rate unachievable: achieved {achieved:.1}/s of {target}/s target")]
    RateUnachievable { target: u64, achieved: f64 },
    #[error("harness fault: {0}")]
    Harness(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// One-shot broker stats dump over a short-lived client.
pub fn stats_query(
    endpoint: &crate::transport::Endpoint,
    timeout: Duration,
) -> Result<serde_json::Value, BenchError> {
    recovery::stats_query_impl(endpoint, timeout)
}

/// Reserves a free TCP port by binding and immediately releasing it.
pub(crate) fn reserve_port() -> Result<u16, BenchError> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    Ok(listener.local_addr()?.port())
}

/// Polls until something is listening on `addr`.
pub(crate) fn wait_port(addr: &str, timeout: Duration) -> Result<(), BenchError> {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        if std::net::TcpStream::connect_timeout(
            &addr.parse().map_err(|e| BenchError::Harness(format!("{e}")))?,
            Duration::from_millis(200),
        )
        .is_ok()
        {
            return Ok(());
        }
        if std::time::Instant::now() > deadline {
            return Err(BenchError::Harness(format!("nothing listening on {addr}")));
        }
        std::thread::sleep(Duration::from_millis(25));
    }
}
