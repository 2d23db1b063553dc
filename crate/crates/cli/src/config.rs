//! Configuration files and environment overrides.
//!
//! Every command that takes a config reads a JSON file, layers
//! `SPIKENAV_`-prefixed environment variables on top, and only then
//! deserializes into the typed struct — so any key can be overridden
//! without editing the file. `__` separates nesting levels:
//! `SPIKENAV_TRAIN__LR=2e-4` sets `train.lr`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spikenav_core::error::Result;
use spikenav_core::{FilterParams, NetConfig, TrainConfig};

/// Environment-variable prefix recognized by [`load_config`].
pub const ENV_PREFIX: &str = "SPIKENAV_";

/// One IMU/truth file pair making up a training sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeqPair {
    pub imu: PathBuf,
    pub truth: PathBuf,
}

/// Schema of the `train` command's config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFileConfig {
    /// Directory holding `<name>_imu.csv` / `<name>_truth.csv` pairs for
    /// the sequences named by the split manifest.
    pub data_root: Option<PathBuf>,
    /// Split manifest whose `train` list selects the sequences.
    pub split: Option<PathBuf>,
    /// Explicit sequence pairs; may be combined with a manifest.
    pub sequences: Vec<SeqPair>,
    /// Where checkpoints, the log, and the resolved config are written.
    pub out_dir: PathBuf,
    /// Spacing between window starts in samples; defaults to the window
    /// length (non-overlapping windows).
    pub stride: Option<usize>,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub filter: FilterParams,
}

/// Schema of the `run`/`eval` filter config file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunFileConfig {
    pub filter: FilterParams,
}

/// Read a JSON config, apply environment overrides, deserialize.
///
/// Without a path the overrides apply on top of an empty object, so a
/// command can run on defaults alone.
pub fn load_config<T: serde::de::DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let mut value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Value::Object(Map::new()),
    };
    apply_env_overrides(&mut value, std::env::vars());
    Ok(serde_json::from_value(value)?)
}

/// Merge `SPIKENAV_`-prefixed variables into a JSON value.
///
/// The part after the prefix is lowercased and split on `__` into an
/// object path; the value is parsed as JSON when possible and kept as a
/// string otherwise. Variables are applied in sorted name order so the
/// result never depends on environment iteration order.
pub fn apply_env_overrides(value: &mut Value, vars: impl Iterator<Item = (String, String)>) {
    let mut overrides: Vec<(String, String)> = vars
        .filter_map(|(k, v)| {
            k.strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v))
        })
        .collect();
    overrides.sort();

    for (path, raw) in overrides {
        let parts: Vec<&str> = path.split("__").collect();
        if parts.iter().any(|p| p.is_empty()) {
            continue;
        }
        let mut cur = &mut *value;
        for part in &parts[..parts.len() - 1] {
            if !cur.is_object() {
                *cur = Value::Object(Map::new());
            }
            cur = cur
                .as_object_mut()
                .expect("just ensured object")
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
        }
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let leaf = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        cur.as_object_mut()
            .expect("just ensured object")
            .insert(parts.last().expect("non-empty path").to_string(), leaf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn env_overrides_set_nested_keys() {
        let mut v = json!({"train": {"lr": 1e-4, "epochs": 10}});
        let vars = vec![
            ("SPIKENAV_TRAIN__LR".to_string(), "0.002".to_string()),
            ("SPIKENAV_OUT_DIR".to_string(), "runs/x".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        apply_env_overrides(&mut v, vars.into_iter());
        assert_eq!(v["train"]["lr"], json!(0.002));
        assert_eq!(v["train"]["epochs"], json!(10));
        // Not valid JSON, so the raw text becomes a string.
        assert_eq!(v["out_dir"], json!("runs/x"));
    }

    #[test]
    fn env_overrides_create_missing_objects() {
        let mut v = json!({});
        let vars = vec![(
            "SPIKENAV_FILTER__SIGMA_LAT2".to_string(),
            "0.25".to_string(),
        )];
        apply_env_overrides(&mut v, vars.into_iter());
        assert_eq!(v["filter"]["sigma_lat2"], json!(0.25));
    }

    #[test]
    fn typed_config_defaults_fill_unset_fields() {
        let mut v = json!({"train": {"epochs": 3}});
        apply_env_overrides(&mut v, std::iter::empty());
        let cfg: TrainFileConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.window_n, TrainConfig::default().window_n);
        assert_eq!(cfg.net.d_model, NetConfig::default().d_model);
    }
}
