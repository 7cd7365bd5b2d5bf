//! Versioned JSON run configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::estimate::Tuning;
use crate::scenario::ScenarioConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Scenario keys a configuration must spell out, with their standard levels.
pub const REQUIRED_SCENARIO_KEYS: [(&str, &str); 5] = [
    ("delay_ac_hours", "hours, standard levels 0, 12, 24, 36"),
    ("delay_in_hours", "hours, standard levels 0, 6, 12, 24"),
    ("k_sigma", "noise multiplier, standard levels 0.5, 1, 2"),
    ("k_theta", "parameter mismatch, standard levels 0, 0.1, 0.2, 0.3"),
    ("k_x", "initial-state error multiplier, standard levels 0, 0.5, 1, 2"),
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("config key `{key}` is missing ({domain})")]
    Missing { key: String, domain: String },
    #[error("config version {found} is not supported (expected {CONFIG_VERSION})")]
    Version { found: u64 },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<Tuning>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { version: CONFIG_VERSION, scenario: ScenarioConfig::default(), tuning: None }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let v: Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| ConfigError::Invalid("top level must be an object".into()))?;
        let version = obj
            .get("version")
            .ok_or_else(|| ConfigError::Missing { key: "version".into(), domain: format!("integer, currently {CONFIG_VERSION}") })?
            .as_u64()
            .ok_or_else(|| ConfigError::Invalid("version must be an integer".into()))?;
        if version != CONFIG_VERSION as u64 {
            return Err(ConfigError::Version { found: version });
        }
        let scenario = obj
            .get("scenario")
            .ok_or_else(|| ConfigError::Missing { key: "scenario".into(), domain: "object".into() })?
            .as_object()
            .ok_or_else(|| ConfigError::Invalid("scenario must be an object".into()))?;
        for (key, domain) in REQUIRED_SCENARIO_KEYS {
            if !scenario.contains_key(key) {
                return Err(ConfigError::Missing { key: format!("scenario.{key}"), domain: domain.into() });
            }
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(t) = &self.tuning {
            t.validate().map_err(|e| ConfigError::Invalid(format!("tuning: {e}")))?;
        }
        Ok(())
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
