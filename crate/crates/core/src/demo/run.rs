//! Supervised demo runs.
//!
//! Two flavors with identical semantics: `run_in_process` drives every role
//! on threads inside one process (used by tests, fully deterministic), and
//! `supervise` spawns one child process per role the way a deployment
//! would, tearing the long-running roles down once inference completes its
//! cycles, then audits the trace.

use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::broker::{Broker, BrokerConfig};
use crate::record::Region;
use crate::transport::Endpoint;

use super::{audit_run, demo_schema, run_executor, run_inference, run_materializer, run_producer};
use super::{AuditReport, DemoConfig, DemoError};

/// Prepares a fresh run directory: region file and empty log dir.
pub fn prepare_run(cfg: &DemoConfig) -> Result<(), DemoError> {
    if let Some(parent) = cfg.region_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::create_dir_all(&cfg.log_dir)?;
    Region::create(&cfg.region_path, &demo_schema(&cfg.project.project_id))?;
    Ok(())
}

/// Runs the full closed loop on threads; returns the audit report.
pub fn run_in_process(cfg: &DemoConfig, cycles: u64) -> Result<AuditReport, DemoError> {
    prepare_run(cfg)?;
    let broker = if cfg.spawn_broker {
        Some(
            Broker::start(&cfg.endpoint, BrokerConfig::default())
                .map_err(|e| DemoError::Other(format!("broker start: {e}")))?,
        )
    } else {
        None
    };

    let stop = Arc::new(AtomicBool::new(false));
    let mut workers = Vec::new();
    for role in ["producer", "executor", "materializer"] {
        let cfg = cfg.clone();
        let stop = Arc::clone(&stop);
        let role = role.to_string();
        workers.push(
            std::thread::Builder::new()
                .name(format!("anchor-demo-{role}"))
                .spawn(move || -> Result<(), DemoError> {
                    match role.as_str() {
                        "producer" => run_producer(&cfg, &stop).map(|_| ()),
                        "executor" => run_executor(&cfg, &stop).map(|_| ()),
                        _ => run_materializer(&cfg, &stop).map(|_| ()),
                    }
                })
                .expect("spawn demo role"),
        );
    }

    let inference = run_inference(cfg, cycles, &stop);
    stop.store(true, Ordering::SeqCst);
    for w in workers {
        match w.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(DemoError::Other("demo role panicked".into())),
        }
    }
    drop(broker);
    inference?;
    audit_run(cfg, cycles)
}

/// Runs the loop with one child process per role. `exe` is the CLI binary;
/// the written config file carries every parameter the children need.
pub fn supervise(cfg: &DemoConfig, cycles: u64, exe: &Path) -> Result<AuditReport, DemoError> {
    prepare_run(cfg)?;
    let config_path = cfg.log_dir.join("run-config.conf");
    std::fs::write(&config_path, cfg.to_file_string())?;

    let mut broker_child = if cfg.spawn_broker {
        let ep = match &cfg.endpoint {
            Endpoint::Tcp(a) => a.clone(),
            Endpoint::Mem(_) => {
                return Err(DemoError::Other(
                    "mem endpoints cannot cross process boundaries; use host:port".into(),
                ))
            }
        };
        Some(spawn_role(exe, &["broker", "--listen", &ep])?)
    } else {
        None
    };

    let cfg_arg = config_path.to_string_lossy().to_string();
    let mut producer = spawn_role(exe, &["demo", "producer", "--config", &cfg_arg])?;
    let mut executor = spawn_role(exe, &["demo", "executor", "--config", &cfg_arg])?;
    let mut materializer = spawn_role(exe, &["demo", "materializer", "--config", &cfg_arg])?;

    let cycles_arg = cycles.to_string();
    let mut inference = spawn_role(
        exe,
        &["demo", "inference", "--config", &cfg_arg, "--cycles", &cycles_arg],
    )?;

    // Inference exits once every cycle has resolved; everyone else is
    // long-running and gets a terminate signal afterwards.
    let status = inference.wait()?;
    let mut failure: Option<String> = if status.success() {
        None
    } else {
        Some(format!("inference exited with {status}"))
    };

    for child in [&mut producer, &mut executor, &mut materializer] {
        terminate(child);
    }
    for (name, child) in [
        ("producer", &mut producer),
        ("executor", &mut executor),
        ("materializer", &mut materializer),
    ] {
        if !wait_with_timeout(child, Duration::from_secs(10)) {
            let _ = child.kill();
            let _ = child.wait();
            failure.get_or_insert(format!("{name} did not stop in time"));
        }
    }
    if let Some(broker) = broker_child.as_mut() {
        terminate(broker);
        if !wait_with_timeout(broker, Duration::from_secs(10)) {
            let _ = broker.kill();
            let _ = broker.wait();
        }
    }
    if let Some(reason) = failure {
        return Err(DemoError::Other(reason));
    }
    audit_run(cfg, cycles)
}

fn spawn_role(exe: &Path, args: &[&str]) -> Result<Child, DemoError> {
    Command::new(exe)
        .args(args)
        .stdin(Stdio::null())
        .spawn()
        .map_err(|e| DemoError::Other(format!("spawn {:?}: {e}", args.first().unwrap_or(&""))))
}

fn terminate(child: &mut Child) {
    // SAFETY: plain signal send to a child we own.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
    }
}

fn wait_with_timeout(child: &mut Child, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => return true,
            Ok(None) => {
                if Instant::now() >= deadline {
                    return false;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            Err(_) => return true,
        }
    }
}
