//! One JSON file configures a run: `{"model": {...}, "train": {...}}`.
//! Command-line overrides use dotted keys (`train.epochs=10`) and must name
//! an existing field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config schema: {0}")]
    Schema(String),
    #[error("override `{0}` is not of the form key=value")]
    Malformed(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Config keys with the hyperparameter-table row each one mirrors.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model.mp_layers", "Local MP: # Layers"),
    ("model.mp_hidden", "Local MP: # Hidden Features"),
    ("model.mp_type", "Local MP: MP Type (gine)"),
    ("model.aggregation", "Local MP: Aggregation (sum|mean)"),
    ("model.activation", "Local MP: Activation (relu)"),
    ("model.tree_activation", "Local MP: Tree Activation (leaky_relu|none)"),
    ("model.mp_dropout", "Local MP: Dropout"),
    ("model.edge_dropout", "Local MP: Edge Dropout"),
    ("model.pe_emb_dim", "Pos. Enc.: Encoder PE Emb. Dim."),
    ("model.pe.kinds", "Pos. Enc.: PE Type (list of DEG|LPE|SPDE)"),
    ("model.pe.dim", "Pos. Enc.: PE Dim."),
    ("model.pe.merge", "Pos. Enc.: PE Merge (concat|sum)"),
    ("model.pe.degree_cap", "Pos. Enc.: largest distinct degree for DEG"),
    ("model.mp_pe", "Pos. Enc.: MP PE (NONE|LPE)"),
    ("model.transformer_hidden", "Transformer: # Hidden Features"),
    ("model.ffn_hidden", "Transformer: # FFN Hidden Features"),
    ("model.transformer_layers", "Transformer: # Layers"),
    ("model.heads", "Transformer: # Heads"),
    ("model.transformer_dropout", "Transformer: Dropout"),
    ("model.padding_dim", "Transformer: Padding Dim. (cap on tree size, null for none)"),
    ("model.readout_hidden", "Readout: # Hidden Features (null = input width)"),
    ("model.dual_readout", "Readout: concatenate summed atom features with CLS"),
    ("model.virtual_node", "Virtual node on the message-passing graph"),
    ("train.epochs", "Optimization: # Epochs"),
    ("train.learning_rate", "Optimization: Learning Rate"),
    ("train.optimizer", "Optimization: Optimizer (adam|adamw)"),
    ("train.weight_decay", "Optimization: AdamW weight decay"),
    ("train.scheduler", "Optimization: Scheduler (none|rop)"),
    ("train.rop_factor", "Optimization: ROP factor"),
    ("train.rop_patience", "Optimization: ROP patience"),
    ("train.batch_size", "Optimization: Batch Size"),
    ("train.seed", "Random seed for init, splits, shuffling and dropout"),
    ("train.split", "Data split (random|provided)"),
    ("train.split_ratios", "Train/valid/test fractions for the random split"),
    ("train.shards", "Parallel sub-batches per batch"),
];

impl RunConfig {
    pub fn zinc() -> Self {
        RunConfig { model: ModelConfig::zinc(), train: TrainConfig::zinc() }
    }

    pub fn from_value(v: Value) -> Result<Self, ConfigError> {
        let c: RunConfig = serde_json::from_value(v).map_err(|e| ConfigError::Schema(e.to_string()))?;
        c.model.validate().map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        c.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Value, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Schema(format!("{}: {e}", path.display())))
    }

    /// Loads a config file and applies `key=value` overrides in order.
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut v = Self::load(path)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets a dotted key. The value is parsed as JSON, falling back to a plain
/// string (`model.pe.merge=sum`).
pub fn apply_override(config: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Malformed(assignment.to_string()))?;
    let key = key.trim();
    if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
        return Err(ConfigError::UnknownKey(key.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = slot.as_object_mut().ok_or_else(|| ConfigError::Schema(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zinc_value() -> Value {
        serde_json::to_value(RunConfig::zinc()).unwrap()
    }

    #[test]
    fn every_serialized_key_is_documented() {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
            for (k, child) in v.as_object().unwrap() {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match child {
                    Value::Object(_) => walk(&key, child, out),
                    _ => out.push(key),
                }
            }
        }
        let mut keys = vec![];
        walk("", &zinc_value(), &mut keys);
        let documented: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        for k in &keys {
            assert!(documented.contains(&k.as_str()), "{k} missing from CONFIG_KEYS");
        }
        assert_eq!(keys.len(), documented.len());
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut v = zinc_value();
        apply_override(&mut v, "train.epochs=7").unwrap();
        apply_override(&mut v, "model.pe.merge=sum").unwrap();
        apply_override(&mut v, "model.pe.kinds=[\"LPE\"]").unwrap();
        apply_override(&mut v, "model.padding_dim=null").unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.pe.merge, crate::spectral::PeMerge::Sum);
        assert_eq!(c.model.padding_dim, None);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = zinc_value();
        assert!(matches!(apply_override(&mut v, "train.epochz=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(apply_override(&mut v, "train.epochs"), Err(ConfigError::Malformed(_))));
        v["train"]["bogus"] = 1.into();
        let err = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn invalid_values_are_reported() {
        let mut v = zinc_value();
        apply_override(&mut v, "model.heads=3").unwrap();
        assert!(matches!(RunConfig::from_value(v), Err(ConfigError::Invalid(_))));
    }
}
