//! Run configuration: a JSON file merged with `--set key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use capnet_core::error::{Error, Result};
use capnet_core::model::ModelConfig;
use capnet_core::synthdata::CorpusConfig;
use capnet_core::training::TrainConfig;

/// Everything a run needs, fully validated before any work starts.
/// Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()
    }
}

/// Loads the config file (empty object when absent) and applies dotted-path
/// overrides, then deserializes strictly.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    for kv in sets {
        apply_set(&mut value, kv)?;
    }
    let cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies one `a.b.c=json-or-string` override onto a JSON tree.
pub fn apply_set(value: &mut serde_json::Value, kv: &str) -> Result<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set {kv:?}: expected KEY=VALUE")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = value;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = serde_json::json!({});
        }
        let map = node.as_object_mut().unwrap();
        if i == parts.len() - 1 {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(serde_json::json!({}));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_from_empty() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.model.pooling.markers, 36);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let cfg = load_config(
            None,
            &["train.batch_size=8".into(), "model.pooling.threshold=0.4".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.model.pooling.threshold, 0.4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = load_config(None, &["train.batch_sizes=8".into()]).unwrap_err();
        assert!(err.to_string().contains("batch_sizes"), "{err}");
    }

    #[test]
    fn malformed_set_rejected() {
        assert!(apply_set(&mut serde_json::json!({}), "no-equals").is_err());
    }
}
