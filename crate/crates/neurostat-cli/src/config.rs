//! Run configuration: one JSON document covering the model, the training
//! settings and data paths. Precedence, lowest to highest: built-in
//! defaults, `--preset`, the `--config` file, individual CLI flags.
//! Unknown keys anywhere in the document are rejected.

use std::path::{Path, PathBuf};

use neurostat::model::ModelConfig;
use neurostat::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<RunConfig, String> {
        let model = match name {
            "synthetic1d" => ModelConfig::synthetic_1d(),
            "spatial-mnist" => ModelConfig::spatial_mnist(),
            other => {
                return Err(format!(
                    "unknown preset `{other}` (expected synthetic1d or spatial-mnist)"
                ))
            }
        };
        Ok(RunConfig {
            model,
            ..RunConfig::default()
        })
    }

    /// Loads `path` on top of `self`: keys present in the file override the
    /// current values, everything else is kept.
    pub fn overlay_file(self, path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        let file_value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| format!("{}: invalid JSON: {e}", path.display()))?;
        let mut base = serde_json::to_value(&self).expect("config serializes");
        merge(&mut base, file_value);
        serde_json::from_value(base).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut serde_json::Value, incoming: serde_json::Value) {
    match (base, incoming) {
        (serde_json::Value::Object(b), serde_json::Value::Object(inc)) => {
            for (k, v) in inc {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
