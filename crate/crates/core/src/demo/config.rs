//! Demo workflow configuration: one project bound to its inference policy
//! plus the runtime knobs shared by all roles.

use std::path::{Path, PathBuf};

use crate::config::{Config, ConfigError};
use crate::transport::Endpoint;

/// Inference binding for one project.
#[derive(Debug, Clone)]
pub struct ProjectConfig {
    pub project_id: String,
    /// Stub policy selector: `fb-threshold` closes the loop on the plant
    /// feedback value; `agg-threshold` acts on the producer's window mean.
    pub model_id: String,
    /// Threshold the policy steers toward.
    pub theta: f64,
    /// Proportional gain applied to the deviation.
    pub gain: f64,
    pub command_channel: String,
    pub status_channel: String,
    pub command_prio: u8,
    pub status_prio: u8,
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.command_channel == self.status_channel {
            return Err(ConfigError::BadValue {
                section: "project".into(),
                key: "status_channel".into(),
                reason: "command and status channels must differ".into(),
            });
        }
        for (key, prio) in [
            ("command_prio", self.command_prio),
            ("status_prio", self.status_prio),
        ] {
            if prio > crate::wire::MAX_PRIO {
                return Err(ConfigError::BadValue {
                    section: "project".into(),
                    key: key.into(),
                    reason: format!("priority {prio} out of range 0..=7"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub project: ProjectConfig,
    pub endpoint: Endpoint,
    pub region_path: PathBuf,
    pub log_dir: PathBuf,
    /// Window size W for the producer's sliding aggregation.
    pub window: usize,
    /// Tumbling windows instead of sliding by one.
    pub tumbling: bool,
    /// Minimum spacing between inference cycles.
    pub cycle_interval_ms: u64,
    /// Default cycle count for a supervised run.
    pub cycles: u64,
    /// Synthetic observation stream: seed, pacing and value range.
    pub observation_seed: u64,
    pub observation_interval_ms: u64,
    pub raw_min: f64,
    pub raw_max: f64,
    pub walk_step: f64,
    /// Every n-th synthetic observation is malformed (0 disables).
    pub malformed_every: u64,
    /// Plant initial value and injected failures (1-based command indices).
    pub plant_initial: f64,
    pub failure_cycles: Vec<u64>,
    /// Spawn a broker as part of `demo run` (otherwise one must already be
    /// listening on `endpoint`).
    pub spawn_broker: bool,
}

impl DemoConfig {
    /// A ready-to-run configuration rooted at `dir` (region, logs).
    pub fn example(dir: &Path) -> DemoConfig {
        DemoConfig {
            project: ProjectConfig {
                project_id: "demo".into(),
                model_id: "fb-threshold".into(),
                theta: 0.8,
                gain: 0.5,
                command_channel: "cmd".into(),
                status_channel: "status".into(),
                command_prio: 5,
                status_prio: 3,
            },
            endpoint: Endpoint::Tcp("127.0.0.1:7401".into()),
            region_path: dir.join("records.anchor"),
            log_dir: dir.join("logs"),
            window: 8,
            tumbling: false,
            cycle_interval_ms: 100,
            cycles: 100,
            observation_seed: 42,
            observation_interval_ms: 20,
            raw_min: 0.0,
            raw_max: 10.0,
            walk_step: 0.5,
            malformed_every: 0,
            plant_initial: 0.0,
            failure_cycles: Vec::new(),
            spawn_broker: true,
        }
    }

    pub fn from_file(path: &Path) -> Result<DemoConfig, ConfigError> {
        let cfg = Config::from_file(path)?;
        DemoConfig::from_config(&cfg)
    }

    pub fn from_config(cfg: &Config) -> Result<DemoConfig, ConfigError> {
        let project = ProjectConfig {
            project_id: cfg.get_or("project", "project_id", "demo"),
            model_id: cfg.get_or("project", "model_id", "fb-threshold"),
            theta: cfg.parse("project", "theta", 0.8)?,
            gain: cfg.parse("project", "gain", 0.5)?,
            command_channel: cfg.get_or("project", "command_channel", "cmd"),
            status_channel: cfg.get_or("project", "status_channel", "status"),
            command_prio: cfg.parse("project", "command_prio", 5u8)?,
            status_prio: cfg.parse("project", "status_prio", 3u8)?,
        };
        project.validate()?;
        let endpoint_raw = cfg.get_or("demo", "endpoint", "127.0.0.1:7401");
        let endpoint = Endpoint::parse(&endpoint_raw).map_err(|e| ConfigError::BadValue {
            section: "demo".into(),
            key: "endpoint".into(),
            reason: e.to_string(),
        })?;
        let failure_cycles = cfg
            .get_or("demo", "failure_cycles", "")
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse::<u64>().map_err(|_| ConfigError::BadValue {
                    section: "demo".into(),
                    key: "failure_cycles".into(),
                    reason: format!("bad index {s:?}"),
                })
            })
            .collect::<Result<Vec<u64>, _>>()?;
        let window = cfg.parse("demo", "window", 8usize)?;
        if window == 0 {
            return Err(ConfigError::BadValue {
                section: "demo".into(),
                key: "window".into(),
                reason: "window must be >= 1".into(),
            });
        }
        Ok(DemoConfig {
            project,
            endpoint,
            region_path: PathBuf::from(cfg.get_or("demo", "region_path", "records.anchor")),
            log_dir: PathBuf::from(cfg.get_or("demo", "log_dir", "logs")),
            window,
            tumbling: cfg.parse("demo", "tumbling", false)?,
            cycle_interval_ms: cfg.parse("demo", "cycle_interval_ms", 100u64)?,
            cycles: cfg.parse("demo", "cycles", 100u64)?,
            observation_seed: cfg.parse("demo", "observation_seed", 42u64)?,
            observation_interval_ms: cfg.parse("demo", "observation_interval_ms", 20u64)?,
            raw_min: cfg.parse("demo", "raw_min", 0.0f64)?,
            raw_max: cfg.parse("demo", "raw_max", 10.0f64)?,
            walk_step: cfg.parse("demo", "walk_step", 0.5f64)?,
            malformed_every: cfg.parse("demo", "malformed_every", 0u64)?,
            plant_initial: cfg.parse("demo", "plant_initial", 0.0f64)?,
            failure_cycles,
            spawn_broker: cfg.parse("demo", "spawn_broker", true)?,
        })
    }

    /// Renders the config back into the key=value file format, so a
    /// supervisor can hand a concrete configuration to its role children.
    pub fn to_file_string(&self) -> String {
        let p = &self.project;
        format!(
            "[project]\n\
             project_id = {}\n\
             model_id = {}\n\
             theta = {}\n\
             gain = {}\n\
             command_channel = {}\n\
             status_channel = {}\n\
             command_prio = {}\n\
             status_prio = {}\n\
             \n\
             [demo]\n\
             endpoint = {}\n\
             region_path = {}\n\
             log_dir = {}\n\
             window = {}\n\
             tumbling = {}\n\
             cycle_interval_ms = {}\n\
             cycles = {}\n\
             observation_seed = {}\n\
             observation_interval_ms = {}\n\
             raw_min = {}\n\
             raw_max = {}\n\
             walk_step = {}\n\
             malformed_every = {}\n\
             plant_initial = {}\n\
             failure_cycles = {}\n\
             spawn_broker = {}\n",
            p.project_id,
            p.model_id,
            p.theta,
            p.gain,
            p.command_channel,
            p.status_channel,
            p.command_prio,
            p.status_prio,
            self.endpoint,
            self.region_path.display(),
            self.log_dir.display(),
            self.window,
            self.tumbling,
            self.cycle_interval_ms,
            self.cycles,
            self.observation_seed,
            self.observation_interval_ms,
            self.raw_min,
            self.raw_max,
            self.walk_step,
            self.malformed_every,
            self.plant_initial,
            self.failure_cycles
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.spawn_broker,
        )
    }

    pub fn executor_log(&self) -> PathBuf {
        self.log_dir.join("executor.anchorlog")
    }

    pub fn producer_log(&self) -> PathBuf {
        self.log_dir.join("producer.anchorlog")
    }

    pub fn inference_log(&self) -> PathBuf {
        self.log_dir.join("inference.anchorlog")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_file_format() {
        let mut cfg = DemoConfig::example(Path::new("/tmp/x"));
        cfg.failure_cycles = vec![3, 17];
        cfg.project.theta = 0.65;
        let text = cfg.to_file_string();
        let parsed =
            DemoConfig::from_config(&Config::from_str_content(&text).unwrap()).unwrap();
        assert_eq!(parsed.project.theta, 0.65);
        assert_eq!(parsed.failure_cycles, vec![3, 17]);
        assert_eq!(parsed.window, 8);
        assert_eq!(parsed.endpoint, cfg.endpoint);
    }

    #[test]
    fn rejects_equal_channels_and_bad_prio() {
        let mut cfg = DemoConfig::example(Path::new("/tmp/x"));
        cfg.project.status_channel = cfg.project.command_channel.clone();
        assert!(cfg.project.validate().is_err());

        let mut cfg2 = DemoConfig::example(Path::new("/tmp/x"));
        cfg2.project.command_prio = 9;
        assert!(cfg2.project.validate().is_err());
    }
}
