//! Flat `key = value` configuration files with `[section]` headers.
//!
//! Deliberately not a full TOML parser: values are bare strings interpreted
//! by the consumer, `#` starts a comment, and an environment variable named
//! `ANCHOR_<SECTION>_<KEY>` (upper-cased, `-` replaced by `_`) overrides the
//! file value.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing required key [{section}] {key}")]
    MissingKey { section: String, key: String },
    #[error("bad value for [{section}] {key}: {reason}")]
    BadValue {
        section: String,
        key: String,
        reason: String,
    },
}

/// Parsed configuration: section -> key -> value.
#[derive(Debug, Clone, Default)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Config, ConfigError> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    line: idx + 1,
                    reason: format!("unterminated section header {line:?}"),
                })?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line: idx + 1,
                    reason: "empty key".into(),
                });
            }
            sections
                .entry(current.clone())
                .or_default()
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { sections })
    }

    fn env_override(section: &str, key: &str) -> Option<String> {
        let name = format!("ANCHOR_{}_{}", env_token(section), env_token(key));
        std::env::var(name).ok()
    }

    /// Raw lookup, environment override applied.
    pub fn get(&self, section: &str, key: &str) -> Option<String> {
        if let Some(v) = Self::env_override(section, key) {
            return Some(v);
        }
        self.sections.get(section)?.get(key).cloned()
    }

    pub fn require(&self, section: &str, key: &str) -> Result<String, ConfigError> {
        self.get(section, key).ok_or_else(|| ConfigError::MissingKey {
            section: section.to_string(),
            key: key.to_string(),
        })
    }

    pub fn get_or(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or_else(|| default.to_string())
    }

    pub fn parse<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                reason: format!("cannot parse {raw:?}"),
            }),
        }
    }

    pub fn sections(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, String>)> {
        self.sections.iter()
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }
}

fn env_token(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            'a'..='z' => c.to_ascii_uppercase(),
            'A'..='Z' | '0'..='9' => c,
            _ => '_',
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = Config::from_str_content(
            "# top comment\n[broker]\nqueue_capacity = 128\nmax_residence_us = 1000\n\n[demo]\ntheta = 0.8\n",
        )
        .unwrap();
        assert_eq!(cfg.get("broker", "queue_capacity").as_deref(), Some("128"));
        assert_eq!(cfg.parse::<f64>("demo", "theta", 0.0).unwrap(), 0.8);
        assert_eq!(cfg.parse::<u64>("demo", "missing", 7).unwrap(), 7);
        assert!(cfg.get("nope", "x").is_none());
    }

    #[test]
    fn rejects_garbage_lines() {
        assert!(Config::from_str_content("just words\n").is_err());
        assert!(Config::from_str_content("[unterminated\n").is_err());
        assert!(Config::from_str_content("= value\n").is_err());
    }

    #[test]
    fn env_wins_over_file() {
        let key = "ANCHOR_TESTSEC_SOME_KEY";
        std::env::set_var(key, "from-env");
        let cfg = Config::from_str_content("[testsec]\nsome_key = from-file\n").unwrap();
        assert_eq!(cfg.get("testsec", "some_key").as_deref(), Some("from-env"));
        std::env::remove_var(key);
    }
}
