//! Run configuration: one JSON document with namespaced sections, resolved
//! as defaults, then the training preset, then the config file, then
//! `--seed`, then `--set` overrides in order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use themewise_core::corpus::SplitFractions;
use themewise_core::{BackendConfig, Preset, Split, SyntheticSpec, TrainConfig};
use themewise_service::ServiceConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Transcript JSONL to use instead of generating a synthetic corpus.
    pub input: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub splits: SplitFractions,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            input: None,
            synthetic: SyntheticSpec::default(),
            splits: SplitFractions::default(),
            split_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiclConfig {
    /// Template JSON; `null` uses the built-in template.
    pub template: Option<PathBuf>,
    /// Re-asks after an unparseable reply.
    pub retries: u32,
}

impl Default for TiclConfig {
    fn default() -> Self {
        TiclConfig {
            template: None,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Split scored by `evaluate` and exported by `figures`.
    pub split: Split,
    /// Cap on exported figure files; `null` exports the whole split.
    pub figures_limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            figures_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub gateway: BackendConfig,
    pub ticl: TiclConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.corpus.synthetic.validate().map_err(|e| cfg(&e))?;
        self.corpus.splits.validate().map_err(|e| cfg(&e))?;
        self.gateway.validate().map_err(|e| cfg(&e))?;
        self.train.validate().map_err(|e| cfg(&e))?;
        if self.eval.split == Split::Unassigned {
            return Err(CliError::Config("eval.split must be train, dev or test".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Parses `a.b.c=value`; the value is JSON when it parses, else a string.
pub fn parse_set(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set `{s}`: expected KEY=VALUE")))?;
    let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set `{s}`: malformed key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut m = Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

/// Merges `overlay` into `base`; every key must already exist in `base`.
fn merge(base: &mut Value, overlay: &Value, prefix: &str) -> Result<(), CliError> {
    let Value::Object(over) = overlay else {
        *base = overlay.clone();
        return Ok(());
    };
    match base {
        Value::Object(b) => {
            for (k, v) in over {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                let slot = b.get_mut(k).ok_or_else(|| CliError::UnknownKey(key.clone()))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        // optional sections default to null and take whatever is given
        Value::Null => {
            *base = overlay.clone();
            Ok(())
        }
        _ => Err(CliError::Config(format!("{prefix}: expected a scalar, found an object"))),
    }
}

fn preset_in(layer: &Value) -> Option<Value> {
    layer.get("train").and_then(|t| t.get("preset")).cloned()
}

pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut layers = Vec::new();
    if let Some(path) = file {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&raw)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::Config(format!("config {}: expected a JSON object", path.display())));
        }
        layers.push(v);
    }
    if let Some(s) = seed {
        layers.push(serde_json::json!({
            "corpus": { "synthetic": { "seed": s }, "split_seed": s },
            "train": { "seed": s },
        }));
    }
    for s in sets {
        let (path, v) = parse_set(s)?;
        layers.push(nest(&path, v));
    }

    let mut defaults = RunConfig::default();
    if let Some(p) = layers.iter().rev().find_map(preset_in) {
        let preset: Preset =
            serde_json::from_value(p.clone()).map_err(|_| CliError::Config(format!("train.preset: unknown preset {p}")))?;
        defaults.train = TrainConfig::preset(preset);
    }
    let mut value = serde_json::to_value(&defaults).expect("defaults serialize");
    for layer in &layers {
        merge(&mut value, layer, "")?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_unknown_keys() {
        let c = resolve(None, &["train.epochs=3".into(), "train.drop_theme=work".into()], Some(11)).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.seed, 11);
        assert_eq!(c.corpus.synthetic.seed, 11);
        assert_eq!(c.train.drop_theme, Some(themewise_core::ThemeId::Work));
        match resolve(None, &["train.epoch=3".into()], None) {
            Err(CliError::UnknownKey(k)) => assert_eq!(k, "train.epoch"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(resolve(None, &["bogus.x=1".into()], None), Err(CliError::UnknownKey(_))));
    }

    #[test]
    fn preset_applies_before_explicit_values() {
        let c = resolve(None, &["train.preset=large".into()], None).unwrap();
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size), (1e-5, 80, 32));
        let c = resolve(None, &["train.preset=large".into(), "train.epochs=5".into()], None).unwrap();
        assert_eq!((c.train.lr, c.train.epochs), (1e-5, 5));
    }

    #[test]
    fn reference_file_matches_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("config.reference.json");
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v, serde_json::to_value(RunConfig::default()).unwrap());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(resolve(None, &["train.lr=-1".into()], None), Err(CliError::Config(_))));
        assert!(matches!(resolve(None, &["corpus.synthetic.num_sessions=\"x\"".into()], None), Err(CliError::Config(_))));
    }
}
