//! Policy inference: read the latest snapshot, produce a command.
//!
//! The stub policy is a pure proportional-to-threshold controller, selected
//! per project by `model_id`:
//!
//! - `fb-threshold`: acts on the materialized plant feedback value, which
//!   closes the loop deterministically (command n depends only on plant
//!   state after command n-1);
//! - `agg-threshold`: acts on the producer's window mean.
//!
//! Cycles are self-clocking: a new command is issued only after all prior
//! commands have produced an outcome (observed through the feedback
//! progress group), with the configured cycle interval as the minimum
//! spacing. That makes a supervised N-cycle run reproducible bit-for-bit.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::client::{Client, ClientOptions};
use crate::clock::mono_ns;
use crate::record::{EntryKind, RecordError, Region, ReplayLogWriter, Snapshot};
use crate::wire::{Region as TopicRegion, TopicAddress};

use super::{group_names, Action, CommandMsg, DemoConfig, DemoError, LoggedCommand, ProjectConfig};

/// What the policy saw in the snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceInput {
    pub value: f64,
    /// Number of samples behind the value; zero means no data yet.
    pub count: u64,
}

/// The deterministic threshold policy.
pub fn infer(input: InferenceInput, project: &ProjectConfig, cycle: u64) -> CommandMsg {
    let (action, magnitude, stale) = if input.count == 0 {
        (Action::Hold, 0.0, true)
    } else if input.value > project.theta {
        (Action::Decrease, project.gain * (input.value - project.theta), false)
    } else if input.value < project.theta {
        (Action::Increase, project.gain * (project.theta - input.value), false)
    } else {
        (Action::Hold, 0.0, false)
    };
    CommandMsg {
        project_id: project.project_id.clone(),
        action,
        magnitude,
        issued_at: cycle,
        stale,
    }
}

#[derive(Debug, Default, Clone)]
pub struct InferenceStats {
    pub cycles: u64,
    pub stale: u64,
}

/// Runs `cycles` inference cycles against the region and the bus, then
/// waits for the last command's outcome. Returns early when `stop` is set.
pub fn run_inference(
    cfg: &DemoConfig,
    cycles: u64,
    stop: &AtomicBool,
) -> Result<InferenceStats, DemoError> {
    std::fs::create_dir_all(&cfg.log_dir)?;
    let groups = group_names(&cfg.project.project_id);
    let input_group = match cfg.project.model_id.as_str() {
        "agg-threshold" => groups.obs_agg.clone(),
        _ => groups.fb_value.clone(),
    };
    let mut region = Region::open(&cfg.region_path)?;
    let mut log = ReplayLogWriter::create(&cfg.inference_log())?;

    let identity = format!("{}-inference", cfg.project.project_id);
    let client = Client::connect(ClientOptions::new(cfg.endpoint.clone(), &identity));
    if !client.wait_registered(Duration::from_secs(30)) && !stop.load(Ordering::SeqCst) {
        return Err(DemoError::Other("inference could not register".into()));
    }
    let topic = TopicAddress::new(
        &cfg.project.command_channel,
        TopicRegion::Local,
        cfg.project.command_prio,
    )
    .map_err(crate::client::ClientError::BadTopic)?;

    let interval = Duration::from_millis(cfg.cycle_interval_ms);
    let mut stats = InferenceStats::default();
    let mut next_cycle_at = Instant::now();

    for cycle in 1..=cycles {
        // Self-clocking: wait for every previous command to resolve, with
        // the cycle interval as minimum spacing.
        loop {
            if stop.load(Ordering::SeqCst) {
                return Ok(stats);
            }
            if let Some(resolved) = outcomes_seen(&mut region, &groups.fb_progress)? {
                if resolved >= cycle - 1 && Instant::now() >= next_cycle_at {
                    break;
                }
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        next_cycle_at = Instant::now() + interval;

        let Some(snapshot) = snapshot_patiently(&mut region, &[input_group.as_str()], stop)?
        else {
            return Ok(stats);
        };
        let values = snapshot
            .group(&input_group)
            .and_then(|g| g.as_f64())
            .ok_or_else(|| DemoError::Other(format!("group {input_group} is not f64")))?;
        let input = match cfg.project.model_id.as_str() {
            // obs_agg layout: mean, min, max, count
            "agg-threshold" => InferenceInput {
                value: values[0],
                count: values[3] as u64,
            },
            // fb layout: plant value, success count
            _ => InferenceInput {
                value: values[0],
                count: values[1] as u64,
            },
        };
        let command = infer(input, &cfg.project, cycle);
        if command.stale {
            stats.stale += 1;
        }
        client.publish(&topic, &command.to_bytes())?;
        // One publish per cycle on this channel: the envelope seq is the
        // cycle index.
        log.append(
            EntryKind::Command,
            mono_ns(),
            &serde_json::to_vec(&LoggedCommand {
                publisher: identity.clone(),
                seq: cycle,
                command,
            })?,
        )?;
        stats.cycles = cycle;
    }

    // Wait for the final outcome so a supervisor can tear down cleanly.
    let deadline = Instant::now() + Duration::from_secs(30);
    while !stop.load(Ordering::SeqCst) && Instant::now() < deadline {
        if outcomes_seen(&mut region, &groups.fb_progress)? == Some(cycles) {
            break;
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    client.shutdown();
    Ok(stats)
}

fn outcomes_seen(region: &mut Region, fb_progress: &str) -> Result<Option<u64>, DemoError> {
    let snap = match region.read_snapshot(&[fb_progress]) {
        Ok(s) => s,
        // Contention is transient (a writer mid-burst or a starved core);
        // the poll loop simply asks again.
        Err(RecordError::ContendedTimeout { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let vals = snap
        .group(fb_progress)
        .and_then(|g| g.as_i64())
        .ok_or_else(|| DemoError::Other(format!("group {fb_progress} is not i64")))?;
    Ok(Some(vals[0].max(0) as u64))
}

/// Snapshot that waits out contention instead of failing; `None` only when
/// the stop flag was raised while waiting.
fn snapshot_patiently(
    region: &mut Region,
    groups: &[&str],
    stop: &AtomicBool,
) -> Result<Option<Snapshot>, DemoError> {
    loop {
        match region.read_snapshot(groups) {
            Ok(s) => return Ok(Some(s)),
            Err(RecordError::ContendedTimeout { .. }) => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(None);
                }
                std::thread::sleep(Duration::from_micros(200));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn project() -> ProjectConfig {
        ProjectConfig {
            project_id: "p1".into(),
            model_id: "fb-threshold".into(),
            theta: 0.5,
            gain: 2.0,
            command_channel: "cmd".into(),
            status_channel: "status".into(),
            command_prio: 5,
            status_prio: 3,
        }
    }

    #[test]
    fn above_threshold_decreases_proportionally() {
        let cmd = infer(InferenceInput { value: 0.8, count: 5 }, &project(), 1);
        assert_eq!(cmd.action, Action::Decrease);
        assert!((cmd.magnitude - 0.6).abs() < 1e-12, "2.0 * (0.8 - 0.5)");
        assert!(!cmd.stale);
    }

    #[test]
    fn below_threshold_increases() {
        let cmd = infer(InferenceInput { value: 0.2, count: 5 }, &project(), 1);
        assert_eq!(cmd.action, Action::Increase);
        assert!((cmd.magnitude - 0.6).abs() < 1e-12);
    }

    #[test]
    fn at_threshold_holds() {
        let cmd = infer(InferenceInput { value: 0.5, count: 5 }, &project(), 1);
        assert_eq!(cmd.action, Action::Hold);
        assert_eq!(cmd.magnitude, 0.0);
        assert!(!cmd.stale);
    }

    #[test]
    fn empty_snapshot_yields_flagged_hold() {
        let cmd = infer(InferenceInput { value: 0.0, count: 0 }, &project(), 1);
        assert_eq!(cmd.action, Action::Hold);
        assert!(cmd.stale);
    }

    #[test]
    fn policy_is_pure() {
        let input = InferenceInput { value: 0.73, count: 9 };
        let a = infer(input, &project(), 4);
        let b = infer(input, &project(), 4);
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
