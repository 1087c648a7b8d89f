//! Replay and verification of recorded runs.
//!
//! The executor log interleaves commands and events exactly as Algorithm-
//! style execution produced them. Replay feeds the recorded commands
//! through a fresh plant with the same failure schedule and checks that the
//! regenerated event bodies are byte-identical to the recorded ones.

use std::path::Path;

use crate::record::{replay_log, EntryKind};

use super::executor::{execute_command, Plant};
use super::{DemoConfig, DemoError, LoggedCommand, LoggedEvent};

/// One entry of a parsed run trace, in log order.
#[derive(Debug, Clone)]
pub enum TraceItem {
    Command(LoggedCommand),
    Event(LoggedEvent),
}

#[derive(Debug, Default)]
pub struct RunTrace {
    pub items: Vec<TraceItem>,
    pub truncated_tail: bool,
}

impl RunTrace {
    pub fn commands(&self) -> Vec<&LoggedCommand> {
        self.items
            .iter()
            .filter_map(|i| match i {
                TraceItem::Command(c) => Some(c),
                _ => None,
            })
            .collect()
    }

    pub fn events(&self) -> Vec<&LoggedEvent> {
        self.items
            .iter()
            .filter_map(|i| match i {
                TraceItem::Event(e) => Some(e),
                _ => None,
            })
            .collect()
    }
}

/// Parses an executor (or inference) log into a trace.
pub fn load_run(path: &Path) -> Result<RunTrace, DemoError> {
    let result = replay_log(path)?;
    let mut trace = RunTrace {
        items: Vec::with_capacity(result.entries.len()),
        truncated_tail: result.truncated_tail,
    };
    for entry in result.entries {
        match entry.kind {
            EntryKind::Command => {
                trace
                    .items
                    .push(TraceItem::Command(serde_json::from_slice(&entry.body)?));
            }
            EntryKind::Event => {
                trace
                    .items
                    .push(TraceItem::Event(serde_json::from_slice(&entry.body)?));
            }
            EntryKind::RecordWrite => {} // producer traffic, not part of the run trace
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub commands: u64,
    pub events_checked: u64,
}

/// Re-executes the recorded commands on a fresh plant and verifies every
/// recorded event body. For the self-contained feedback policy the commands
/// themselves are also re-derived from the replayed loop state, so a config
/// mismatch (a different threshold, say) is flagged at its first divergent
/// cycle. The first mismatch reports the 1-based command cycle.
pub fn replay_run(executor_log: &Path, cfg: &DemoConfig) -> Result<ReplayOutcome, DemoError> {
    let trace = load_run(executor_log)?;
    let commands = trace.commands();
    let events = trace.events();
    let mut plant = Plant::new(cfg.plant_initial);
    let mut checked = 0u64;
    let rederive_commands = cfg.project.model_id != "agg-threshold";
    let mut successes = 0u64;
    for (i, logged) in commands.iter().enumerate() {
        let index = (i + 1) as u64;
        if rederive_commands {
            let input = super::inference::InferenceInput {
                value: plant.value,
                count: successes,
            };
            let expected = super::inference::infer(input, &cfg.project, logged.command.issued_at);
            if expected.to_bytes() != logged.command.to_bytes() {
                return Err(DemoError::ReplayDiverged {
                    cycle: index,
                    detail: format!(
                        "recorded command {:?}, policy re-derives {:?}",
                        logged.command, expected
                    ),
                });
            }
        }
        let (started, outcome) = execute_command(
            &mut plant,
            index,
            &cfg.failure_cycles,
            &cfg.project.project_id,
            logged.seq,
            &logged.command,
        );
        if outcome.status == super::EventStatus::Success {
            successes += 1;
        }
        for (offset, expected) in [(0usize, started), (1usize, outcome)] {
            let pos = i * 2 + offset;
            let Some(recorded) = events.get(pos) else {
                return Err(DemoError::ReplayDiverged {
                    cycle: index,
                    detail: format!("log ends before event {pos}"),
                });
            };
            if recorded.event.to_bytes() != expected.to_bytes() {
                return Err(DemoError::ReplayDiverged {
                    cycle: index,
                    detail: format!(
                        "recorded {:?}, regenerated {:?}",
                        recorded.event, expected
                    ),
                });
            }
            checked += 1;
        }
    }
    if events.len() > commands.len() * 2 {
        return Err(DemoError::ReplayDiverged {
            cycle: commands.len() as u64,
            detail: format!(
                "{} events recorded for {} commands",
                events.len(),
                commands.len()
            ),
        });
    }
    Ok(ReplayOutcome {
        commands: commands.len() as u64,
        events_checked: checked,
    })
}

/// Byte-compares the command and event body sequences of two runs; the
/// first divergence reports its cycle index.
pub fn verify_against(log_a: &Path, log_b: &Path) -> Result<ReplayOutcome, DemoError> {
    let a = load_run(log_a)?;
    let b = load_run(log_b)?;
    let (ca, cb) = (a.commands(), b.commands());
    if ca.len() != cb.len() {
        return Err(DemoError::ReplayDiverged {
            cycle: ca.len().min(cb.len()) as u64,
            detail: format!("{} commands vs {}", ca.len(), cb.len()),
        });
    }
    for (i, (x, y)) in ca.iter().zip(&cb).enumerate() {
        if x.command.to_bytes() != y.command.to_bytes() {
            return Err(DemoError::ReplayDiverged {
                cycle: (i + 1) as u64,
                detail: format!("command bodies differ: {:?} vs {:?}", x.command, y.command),
            });
        }
    }
    let (ea, eb) = (a.events(), b.events());
    if ea.len() != eb.len() {
        return Err(DemoError::ReplayDiverged {
            cycle: (ea.len().min(eb.len()) / 2) as u64,
            detail: format!("{} events vs {}", ea.len(), eb.len()),
        });
    }
    for (i, (x, y)) in ea.iter().zip(&eb).enumerate() {
        if x.event.to_bytes() != y.event.to_bytes() {
            return Err(DemoError::ReplayDiverged {
                cycle: (i / 2 + 1) as u64,
                detail: format!("event bodies differ: {:?} vs {:?}", x.event, y.event),
            });
        }
    }
    Ok(ReplayOutcome {
        commands: ca.len() as u64,
        events_checked: ea.len() as u64,
    })
}
