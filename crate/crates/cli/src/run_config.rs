//! Run configuration: a model, training settings and data location.
//!
//! ```toml
//! [model]          # a model config, see `dybnn::config`
//! ...
//! [train]          # optional; defaults as in `TrainConfig`
//! epochs = 30
//! [data]           # optional
//! dataset = "mnist"
//! dir = "/data/mnist"
//! ```
//!
//! A bare model config (with `[input]` at the top level) is accepted in place
//! of a run config.

use std::path::{Path, PathBuf};

use dybnn::config::ModelConfig;
use dybnn::data::DatasetKind;
use dybnn::presets::preset_text;
use dybnn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Use only the first N training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    /// The dataset named in the config, or the one matching the input shape.
    pub fn dataset(&self) -> Result<DatasetKind, CliError> {
        if let Some(name) = &self.data.dataset {
            return DatasetKind::parse(name).ok_or_else(|| {
                CliError::config(format!("data.dataset: unknown dataset {name:?} (mnist, cifar10)"))
            });
        }
        let i = self.model.input;
        match (i.channels, i.height, i.width) {
            (1, 28, 28) => Ok(DatasetKind::Mnist),
            (3, 32, 32) => Ok(DatasetKind::Cifar10),
            _ => Err(CliError::config(format!(
                "data.dataset: cannot infer a dataset for input {}x{}x{}",
                i.channels, i.height, i.width
            ))),
        }
    }

    /// Canonical TOML with block activations and the dataset filled in.
    pub fn snapshot(&self) -> Result<String, CliError> {
        let mut resolved = self.clone();
        resolved.model = self.model.resolved().map_err(CliError::from_core)?;
        resolved.data.dataset = Some(self.dataset()?.as_str().to_string());
        toml::to_string(&resolved).map_err(|e| CliError::config(format!("cannot encode config: {e}")))
    }
}

/// Reads a config file, or a bundled config when no such file exists.
pub fn load_table(source: &str) -> Result<Table, CliError> {
    let path = Path::new(source);
    let text = if path.is_file() {
        std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
    } else if let Some(text) = preset_text(source) {
        text.to_string()
    } else {
        return Err(CliError::config(format!(
            "{source}: no such file or bundled config (see `dybnn export --list`)"
        )));
    };
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::config(format!("{source}: {}", e.message())))?;
    if table.contains_key("model") {
        Ok(table)
    } else {
        let mut wrapped = Table::new();
        wrapped.insert("model".into(), Value::Table(table));
        Ok(wrapped)
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `dotted.key` (numeric segments index arrays) in `table`.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::config(format!("override `{key}`: empty key segment")));
    }
    let mut cur: &mut Value = table
        .entry(segments[0])
        .or_insert_with(|| Value::Table(Table::new()));
    if segments.len() == 1 {
        *cur = value;
        return Ok(());
    }
    for (depth, seg) in segments[1..].iter().enumerate() {
        let last = depth + 2 == segments.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert((*seg).to_string(), value);
                    return Ok(());
                }
                t.entry(*seg).or_insert_with(|| Value::Table(Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| {
                    CliError::config(format!("override `{key}`: `{seg}` is not an array index"))
                })?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| {
                    CliError::config(format!("override `{key}`: index {idx} out of range (length {len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::config(format!(
                    "override `{key}`: `{seg}` is below a non-table value"
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

fn decode(table: &Table) -> Result<RunConfig, toml::de::Error> {
    Value::Table(table.clone()).try_into()
}

/// Loads `source` and applies `key=value` overrides in order. Every override
/// is validated as it is applied, so an unknown key is reported by name.
pub fn load_run_config(source: &str, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = load_table(source)?;
    decode(&table).map_err(|e| CliError::config(format!("{source}: {}", e.message())))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{ov}`: expected key=value")))?;
        let key = key.trim();
        set_dotted(&mut table, key, parse_value(raw.trim()))?;
        decode(&table).map_err(|e| CliError::config(format!("override `{key}`: {}", e.message())))?;
    }
    let cfg = decode(&table).expect("validated above");
    cfg.model.validate().map_err(CliError::from_core)?;
    cfg.train.validate().map_err(CliError::from_core)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_and_array_keys() {
        let ovs = vec![
            "train.epochs=3".to_string(),
            "model.blocks.1.activation=static".to_string(),
            "train.protocol=two-step".to_string(),
        ];
        let cfg = load_run_config("mnist-dynamic", &ovs).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.block_activation(1), dybnn::config::ActivationMode::Static);
        assert_eq!(cfg.model.block_activation(0), dybnn::config::ActivationMode::Dynamic);
    }

    #[test]
    fn unknown_override_key_is_named() {
        let err = load_run_config("mnist-dynamic", &["train.epoch=3".to_string()]).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("train.epoch"), "{}", err.message);
    }

    #[test]
    fn snapshot_replays_identically() {
        let cfg = load_run_config("cifar-static", &["train.seed=9".to_string()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("snap.toml");
        std::fs::write(&p, cfg.snapshot().unwrap()).unwrap();
        let back = load_run_config(p.to_str().unwrap(), &[]).unwrap();
        assert_eq!(back.snapshot().unwrap(), cfg.snapshot().unwrap());
        assert_eq!(back.train, cfg.train);
    }
}
