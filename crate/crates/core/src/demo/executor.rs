//! Execution side: consume commands, drive the simulated plant, publish
//! feedback events, and materialize outcomes into the record region.
//!
//! Per command the executor records it, publishes a Started event, executes
//! against the plant (honoring the injected failure schedule), then
//! publishes and records the outcome. The materializer is a separate role:
//! it subscribes to the status channel and folds outcomes into the
//! feedback-owned groups (plant value on Success only; progress counters on
//! every outcome).

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use crate::client::{Client, ClientOptions, SubscribeOptions};
use crate::clock::mono_ns;
use crate::record::{EntryKind, GroupValues, Region, ReplayLogWriter, WriterRole};
use crate::wire::{Region as TopicRegion, TopicAddress};

use super::{
    group_names, Action, CommandMsg, DemoConfig, DemoError, EventMsg, EventStatus, LoggedCommand,
    LoggedEvent,
};

/// The simulated remote endpoint: a scalar adjusted by commands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plant {
    pub value: f64,
}

impl Plant {
    pub fn new(initial: f64) -> Plant {
        Plant { value: initial }
    }

    pub fn apply(&mut self, action: Action, magnitude: f64) {
        match action {
            Action::Increase => self.value += magnitude,
            Action::Decrease => self.value -= magnitude,
            Action::Hold => {}
        }
    }
}

/// The execution step shared by the live executor and replay verification:
/// given the plant, the 1-based command index and the failure schedule,
/// produce the Started and outcome events for one command.
pub fn execute_command(
    plant: &mut Plant,
    command_index: u64,
    failure_cycles: &[u64],
    project_id: &str,
    ref_command: u64,
    cmd: &CommandMsg,
) -> (EventMsg, EventMsg) {
    let started = EventMsg {
        project_id: project_id.to_string(),
        ref_command,
        status: EventStatus::Started,
        measured: plant.value,
    };
    let outcome = if failure_cycles.contains(&command_index) {
        EventMsg {
            project_id: project_id.to_string(),
            ref_command,
            status: EventStatus::Failure,
            measured: plant.value, // unchanged: the action did not take
        }
    } else {
        plant.apply(cmd.action, cmd.magnitude);
        EventMsg {
            project_id: project_id.to_string(),
            ref_command,
            status: EventStatus::Success,
            measured: plant.value,
        }
    };
    (started, outcome)
}

#[derive(Debug, Default, Clone)]
pub struct ExecutorStats {
    pub commands: u64,
    pub failures: u64,
}

/// Blocking executor role; returns when `stop` is set.
pub fn run_executor(cfg: &DemoConfig, stop: &AtomicBool) -> Result<ExecutorStats, DemoError> {
    std::fs::create_dir_all(&cfg.log_dir)?;
    let log = Arc::new(Mutex::new(ReplayLogWriter::create(&cfg.executor_log())?));
    let identity = format!("{}-executor", cfg.project.project_id);
    let client = Client::connect(ClientOptions::new(cfg.endpoint.clone(), &identity));

    let status_topic = TopicAddress::new(
        &cfg.project.status_channel,
        TopicRegion::Local,
        cfg.project.status_prio,
    )
    .map_err(crate::client::ClientError::BadTopic)?;

    let plant = Arc::new(Mutex::new(Plant::new(cfg.plant_initial)));
    let count = Arc::new(AtomicU64::new(0));
    let failures = Arc::new(AtomicU64::new(0));
    let failure_cycles = cfg.failure_cycles.clone();
    let project_id = cfg.project.project_id.clone();

    {
        let client_pub = Arc::clone(&client);
        let log = Arc::clone(&log);
        let plant = Arc::clone(&plant);
        let count = Arc::clone(&count);
        let failures = Arc::clone(&failures);
        let identity = identity.clone();
        client.subscribe(&cfg.project.command_channel, SubscribeOptions::default(), move |env| {
            let cmd = match CommandMsg::from_bytes(&env.payload) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("executor: undecodable command payload: {e}");
                    return;
                }
            };
            let index = count.fetch_add(1, Ordering::SeqCst) + 1;
            let now = mono_ns();
            {
                let mut log = log.lock();
                let _ = log.append(
                    EntryKind::Command,
                    now,
                    &serde_json::to_vec(&LoggedCommand {
                        publisher: env.publisher_id.clone(),
                        seq: env.seq,
                        command: cmd.clone(),
                    })
                    .expect("command body serializes"),
                );
            }
            let (started, outcome) = {
                let mut plant = plant.lock();
                execute_command(&mut plant, index, &failure_cycles, &project_id, env.seq, &cmd)
            };
            if outcome.status == EventStatus::Failure {
                failures.fetch_add(1, Ordering::Relaxed);
            }
            // Two events per command on the status channel: seq 2i-1, 2i.
            for (event, seq) in [(started, index * 2 - 1), (outcome, index * 2)] {
                if let Err(e) = client_pub.publish(&status_topic, &event.to_bytes()) {
                    log::warn!("executor: event publish failed: {e}");
                }
                let mut log = log.lock();
                let _ = log.append(
                    EntryKind::Event,
                    mono_ns(),
                    &serde_json::to_vec(&LoggedEvent {
                        publisher: identity.clone(),
                        seq,
                        event,
                    })
                    .expect("event body serializes"),
                );
            }
        })?;
    }

    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(5));
    }
    client.shutdown();
    Ok(ExecutorStats {
        commands: count.load(Ordering::SeqCst),
        failures: failures.load(Ordering::SeqCst),
    })
}

#[derive(Debug, Default, Clone)]
pub struct MaterializerStats {
    pub outcomes: u64,
    pub successes: u64,
}

/// Blocking materializer role: the designated subscriber that folds
/// Success/Failure events into the feedback groups. Started events are
/// log-only on the executor side and ignored here.
pub fn run_materializer(cfg: &DemoConfig, stop: &AtomicBool) -> Result<MaterializerStats, DemoError> {
    let region = Arc::new(Mutex::new(Region::open_writer(
        &cfg.region_path,
        WriterRole::Feedback,
    )?));
    let groups = group_names(&cfg.project.project_id);
    let identity = format!("{}-materializer", cfg.project.project_id);
    let client = Client::connect(ClientOptions::new(cfg.endpoint.clone(), &identity));

    let outcomes = Arc::new(AtomicU64::new(0));
    let successes = Arc::new(AtomicU64::new(0));
    {
        let region = Arc::clone(&region);
        let outcomes = Arc::clone(&outcomes);
        let successes = Arc::clone(&successes);
        client.subscribe(&cfg.project.status_channel, SubscribeOptions::default(), move |env| {
            let event = match EventMsg::from_bytes(&env.payload) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("materializer: undecodable event payload: {e}");
                    return;
                }
            };
            if event.status == EventStatus::Started {
                return;
            }
            let seen = outcomes.fetch_add(1, Ordering::SeqCst) + 1;
            let mut region = region.lock();
            let result = if event.status == EventStatus::Success {
                let wins = successes.fetch_add(1, Ordering::SeqCst) + 1;
                region.write_groups(&[
                    (
                        groups.fb_value.as_str(),
                        &GroupValues::F64(vec![event.measured, wins as f64]),
                    ),
                    (
                        groups.fb_progress.as_str(),
                        &GroupValues::I64(vec![seen as i64, event.ref_command as i64]),
                    ),
                ])
            } else {
                // Failure: the feedback value group stays untouched.
                region.write_group(
                    &groups.fb_progress,
                    &GroupValues::I64(vec![seen as i64, event.ref_command as i64]),
                )
            };
            if let Err(e) = result {
                log::warn!("materializer: record write failed: {e}");
            }
        })?;
    }

    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(5));
    }
    client.shutdown();
    Ok(MaterializerStats {
        outcomes: outcomes.load(Ordering::SeqCst),
        successes: successes.load(Ordering::SeqCst),
    })
}
