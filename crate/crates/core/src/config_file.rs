//! Flat `key=value` run configuration.
//!
//! Keys are config field names, optionally qualified with a section
//! (`model.d_model=32`) when several configs share a field name. Values are
//! converted using the type of the field's current value; lists are comma
//! separated. `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Number, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key {key}: {message}")]
    Value { key: String, message: String },
    #[error("unknown config keys: {0}")]
    Unknown(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |m: &str| ConfigError::Syntax {
                line: i + 1,
                message: m.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key=value"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(syntax("empty key"));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(syntax(&format!("duplicate key {k}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Overrides the fields of `base` named by `section.field` or bare
    /// `field` keys; returns the updated value and the keys it consumed.
    pub fn apply<T>(&self, section: &str, base: &T) -> Result<(T, BTreeSet<String>), ConfigError>
    where
        T: Serialize + DeserializeOwned,
    {
        let Value::Object(mut fields) = serde_json::to_value(base).expect("config serializes") else {
            panic!("config section {section} is not a struct");
        };
        let mut used = BTreeSet::new();
        let prefix = format!("{section}.");
        for (key, raw) in &self.entries {
            let field = key.strip_prefix(&prefix).unwrap_or(key);
            let Some(current) = fields.get(field) else { continue };
            let converted = convert(current, raw).map_err(|message| ConfigError::Value {
                key: key.clone(),
                message,
            })?;
            fields.insert(field.to_string(), converted);
            used.insert(key.clone());
        }
        let out = serde_json::from_value(Value::Object(fields)).map_err(|e| ConfigError::Value {
            key: section.to_string(),
            message: e.to_string(),
        })?;
        Ok((out, used))
    }

    /// Errors on keys no section consumed.
    pub fn check_all_used(&self, used: &BTreeSet<String>) -> Result<(), ConfigError> {
        let unknown: Vec<&str> = self.keys().filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Unknown(unknown.join(", ")))
        }
    }
}

fn number(raw: &str) -> Result<Value, String> {
    if let Ok(u) = raw.parse::<u64>() {
        return Ok(Value::Number(u.into()));
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Ok(Value::Number(i.into()));
    }
    raw.parse::<f64>()
        .ok()
        .and_then(Number::from_f64)
        .map(Value::Number)
        .ok_or_else(|| format!("{raw:?} is not a number"))
}

fn guess(raw: &str) -> Value {
    match raw {
        "" | "none" | "null" => Value::Null,
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => number(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
    }
}

fn convert(current: &Value, raw: &str) -> Result<Value, String> {
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| format!("{raw:?} is not true/false"))?),
        Value::Number(_) => number(raw)?,
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => guess(raw),
        Value::Array(items) => {
            if raw.is_empty() {
                return Ok(Value::Array(vec![]));
            }
            let proto = items.first().cloned().unwrap_or(Value::Null);
            Value::Array(
                raw.split(',')
                    .map(|p| convert(&proto, p.trim()))
                    .collect::<Result<_, _>>()?,
            )
        }
        Value::Object(_) => return Err("nested settings cannot be set from a flat file".into()),
    })
}

/// Renders a config as `section.field=value` lines.
pub fn render<T: Serialize>(section: &str, cfg: &T) -> String {
    let Value::Object(fields) = serde_json::to_value(cfg).expect("config serializes") else {
        return String::new();
    };
    let flat = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => "none".into(),
        Value::Array(a) => a.iter().map(|x| x.to_string().trim_matches('"').to_string()).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    };
    let fields: Map<String, Value> = fields;
    fields
        .iter()
        .map(|(k, v)| format!("{section}.{k}={}\n", flat(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::IngestConfig;
    use crate::model::RoVFConfig;
    use crate::trainer::{OptimizerKind, TrainConfig};

    #[test]
    fn applies_typed_values() {
        let kv = KeyValues::parse(
            "# desk run\nepochs = 5\nlr_peak=1e-3\nfreeze_encoder=true\ncheckpoint_epochs=1,5\noptimizer=adam\nmax_grad_norm=2.5\n",
        )
        .unwrap();
        let (cfg, used) = kv.apply("train", &TrainConfig::default()).unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.lr_peak, 1e-3);
        assert!(cfg.freeze_encoder);
        assert_eq!(cfg.checkpoint_epochs, vec![1, 5]);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.max_grad_norm, Some(2.5));
        assert_eq!(used.len(), 6);
        kv.check_all_used(&used).unwrap();
    }

    #[test]
    fn sections_disambiguate_and_unknown_keys_fail() {
        let kv = KeyValues::parse("model.d_model=32\nstagger_seconds=5/2\nbogus=1").unwrap();
        let (m, mut used) = kv.apply("model", &RoVFConfig::default()).unwrap();
        assert_eq!(m.d_model, 32);
        let (i, u2) = kv.apply("ingest", &IngestConfig::default()).unwrap();
        assert_eq!(i.stagger_seconds.to_string(), "5/2");
        used.extend(u2);
        assert!(matches!(kv.check_all_used(&used), Err(ConfigError::Unknown(k)) if k == "bogus"));
    }

    #[test]
    fn bad_values_and_syntax() {
        assert!(KeyValues::parse("noequals").is_err());
        assert!(KeyValues::parse("a=1\na=2").is_err());
        let kv = KeyValues::parse("epochs=many").unwrap();
        assert!(kv.apply("train", &TrainConfig::default()).is_err());
    }

    #[test]
    fn render_round_trips() {
        let cfg = TrainConfig { epochs: 3, max_grad_norm: Some(1.0), ..Default::default() };
        let kv = KeyValues::parse(&render("train", &cfg)).unwrap();
        assert_eq!(kv.apply("train", &TrainConfig::default()).unwrap().0, cfg);
        let ing = IngestConfig::default();
        let kv = KeyValues::parse(&render("ingest", &ing)).unwrap();
        assert_eq!(kv.apply("ingest", &IngestConfig::default()).unwrap().0, ing);
    }
}
