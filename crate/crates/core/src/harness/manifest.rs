//! JSON run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::RunConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_echo: BTreeMap<String, String>,
    pub phase_timings_ms: BTreeMap<String, f64>,
    pub artifact_paths: Vec<String>,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub peak_matrix_bytes: BTreeMap<String, u64>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            seed: cfg.seed,
            config_echo: cfg.to_pairs().into_iter().collect(),
            phase_timings_ms: BTreeMap::new(),
            artifact_paths: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            command: Some(command.to_string()),
            status: Some("ok".into()),
            counts: BTreeMap::new(),
            peak_matrix_bytes: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Manifest::from_json(&std::fs::read_to_string(path)?)
    }

    /// Rebuilds the configuration from `config_echo`.
    pub fn config(&self) -> Result<RunConfig> {
        let text: String = self.config_echo.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        RunConfig::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_required_keys() {
        let mut m = Manifest::new("stats", &RunConfig::default());
        m.phase_timings_ms.insert("stats".into(), 1.25);
        m.artifact_paths.push("factors_layer0.filt".into());
        let text = m.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["seed", "config_echo", "phase_timings_ms", "artifact_paths", "tool_version"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        let back = Manifest::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config().unwrap(), RunConfig::default());
    }

    #[test]
    fn minimal_document_parses() {
        let m = Manifest::from_json(
            r#"{"seed":1,"config_echo":{},"phase_timings_ms":{},"artifact_paths":[],"tool_version":"x"}"#,
        )
        .unwrap();
        assert_eq!(m.status, None);
    }
}
