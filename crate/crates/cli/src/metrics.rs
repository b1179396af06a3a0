//! `metrics.json`: one document per run, updated section by section as
//! subcommands run. Keys are emitted sorted.

use std::fs;
use std::path::Path;

use flowlab::analysis::{BandError, ModeMetrics, RunMetrics};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const SCHEMA_VERSION: u64 = 1;
pub const FILE_NAME: &str = "metrics.json";

pub struct MetricsDoc {
    root: Map<String, Value>,
}

impl MetricsDoc {
    /// Loads the run's document, or starts an empty one.
    pub fn open(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(FILE_NAME);
        let root = match fs::read_to_string(&path) {
            Ok(text) => match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                _ => return Err(CliError::Input(format!("{} is not a metrics document", path.display()))),
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Map::new(),
            Err(e) => return Err(CliError::Runtime(format!("reading {}: {e}", path.display()))),
        };
        Ok(Self { root })
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.root.insert(key.to_string(), v);
        Ok(())
    }

    /// Sets `key.sub`, creating `key` as an object when missing.
    pub fn set_nested(&mut self, key: &str, sub: &str, value: impl Serialize) -> Result<(), CliError> {
        let v = serde_json::to_value(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        let entry = self
            .root
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !entry.is_object() {
            *entry = Value::Object(Map::new());
        }
        entry.as_object_mut().unwrap().insert(sub.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.root.get(key)
    }

    fn summary(&self) -> RunMetrics {
        let modes = self.root.get("modes");
        let mode: Option<ModeMetrics> = ["network", "oracle", "averaged"]
            .iter()
            .find_map(|s| modes.and_then(|m| m.get(*s)))
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        let profile = self.root.get("profile");
        RunMetrics {
            per_mode: mode.as_ref().map(|m| m.per_mode.clone()).unwrap_or_default(),
            midpoint_mass: mode.map(|m| m.midpoint_mass),
            underestimation_ratio: profile
                .and_then(|p| p.get("underestimation_ratio"))
                .and_then(Value::as_f64),
            loss_curve: self
                .root
                .get("train")
                .and_then(|t| t.get("epoch_losses"))
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or_default(),
            error_band: profile
                .and_then(|p| p.get("error_band"))
                .and_then(|v| serde_json::from_value::<Vec<BandError>>(v.clone()).ok())
                .unwrap_or_default(),
        }
    }

    /// Refreshes the summary and version keys and writes the document.
    pub fn save(mut self, run_dir: &Path) -> Result<(), CliError> {
        let summary = self.summary();
        self.set("summary", summary)?;
        self.set("schema_version", SCHEMA_VERSION)?;
        let path = run_dir.join(FILE_NAME);
        let mut text = serde_json::to_string_pretty(&Value::Object(self.root))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))
    }
}
