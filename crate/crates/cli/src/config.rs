//! Flat dotted-key JSON configuration with typed defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use oamp::grids::write_atomic;
use oamp::{Error, Result};

pub const LOCK_FILE: &str = "config.lock.json";

/// Expected JSON type of a key, taken from its default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Bool,
    Uint,
    Float,
    Str,
}

fn kind_of(v: &Value) -> Kind {
    match v {
        Value::Bool(_) => Kind::Bool,
        Value::Number(n) if n.is_u64() => Kind::Uint,
        Value::Number(_) => Kind::Float,
        Value::String(_) => Kind::Str,
        // `null` marks a required unsigned integer (the seed).
        Value::Null => Kind::Uint,
        Value::Array(_) | Value::Object(_) => Kind::Str,
    }
}

fn matches(kind: Kind, v: &Value) -> bool {
    match kind {
        Kind::Bool => v.is_boolean(),
        Kind::Uint => v.is_u64(),
        Kind::Float => v.is_number(),
        Kind::Str => v.is_string(),
    }
}

/// Effective configuration for one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
    kinds: BTreeMap<String, Kind>,
}

impl RunConfig {
    pub fn with_defaults(defaults: &[(&str, Value)]) -> Self {
        let mut values = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for (k, v) in defaults {
            kinds.insert(k.to_string(), kind_of(v));
            values.insert(k.to_string(), v.clone());
        }
        Self { values, kinds }
    }

    /// Sets `key`, rejecting unknown keys and type mismatches.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let kind = *self
            .kinds
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if !matches(kind, &value) {
            return Err(Error::Config(format!(
                "config key {key:?} expects {}, got {value}",
                match kind {
                    Kind::Bool => "a boolean",
                    Kind::Uint => "a non-negative integer",
                    Kind::Float => "a number",
                    Kind::Str => "a string",
                }
            )));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Parses `value` against the key's type; used for `--set key=value`.
    pub fn set_text(&mut self, key: &str, text: &str) -> Result<()> {
        let kind = *self
            .kinds
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let v = match kind {
            Kind::Str => Value::String(text.to_string()),
            _ => serde_json::from_str(text)
                .map_err(|_| Error::Config(format!("cannot parse {text:?} for key {key:?}")))?,
        };
        self.set(key, v)
    }

    pub fn merge_json(&mut self, text: &str) -> Result<()> {
        let obj: Map<String, Value> = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not a flat JSON object: {e}")))?;
        for (k, v) in obj {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_json(&text)
    }

    fn get(&self, key: &str) -> &Value {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key:?} not registered"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)
            .as_u64()
            .ok_or_else(|| Error::Config(format!("config key {key:?} is required")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).as_f64().expect("type checked on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("type checked on set")
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("type checked on set")
    }

    /// Non-empty string value, or a config error naming the key.
    pub fn required_str(&self, key: &str) -> Result<&str> {
        let s = self.str(key);
        if s.is_empty() {
            Err(Error::Config(format!("config key {key:?} is required")))
        } else {
            Ok(s)
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.required_str(key).map(PathBuf::from)
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let s = self.str(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    pub fn has(&self, key: &str) -> bool {
        self.kinds.contains_key(key)
    }

    pub fn to_json(&self) -> String {
        let obj: Map<String, Value> = self.values.clone().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(obj)).expect("serializable")
    }

    pub fn write_lock(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(LOCK_FILE), self.to_json().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn cfg() -> RunConfig {
        RunConfig::with_defaults(&[
            ("seed", Value::Null),
            ("guidance.rho", json!(0.8)),
            ("steps", json!(15)),
            ("name", json!("guided")),
            ("flag", json!(false)),
        ])
    }

    #[test]
    fn merge_and_typed_access() {
        let mut c = cfg();
        c.merge_json(r#"{"guidance.rho": 1, "steps": 20, "seed": 7}"#).unwrap();
        assert_eq!(c.f64("guidance.rho"), 1.0);
        assert_eq!(c.usize("steps").unwrap(), 20);
        assert_eq!(c.u64("seed").unwrap(), 7);
        c.set_text("name", "pixel-level").unwrap();
        c.set_text("flag", "true").unwrap();
        assert_eq!(c.str("name"), "pixel-level");
        assert!(c.bool("flag"));
    }

    #[test]
    fn rejects_unknown_keys_and_wrong_types() {
        let mut c = cfg();
        assert!(c.merge_json(r#"{"guidance.rhoo": 1}"#).is_err());
        assert!(c.merge_json(r#"{"steps": 1.5}"#).is_err());
        assert!(c.merge_json(r#"{"steps": -1}"#).is_err());
        assert!(c.merge_json(r#"{"name": 3}"#).is_err());
        assert!(c.merge_json(r#"{"guidance": {"rho": 1}}"#).is_err());
        assert!(c.merge_json("[1]").is_err());
    }

    #[test]
    fn seed_is_required() {
        assert!(cfg().u64("seed").is_err());
    }

    #[test]
    fn lock_round_trips() {
        let mut c = cfg();
        c.set("seed", json!(3)).unwrap();
        c.set("guidance.rho", json!(0.1 + 0.2)).unwrap();
        let mut d = cfg();
        d.merge_json(&c.to_json()).unwrap();
        assert_eq!(c, d);
    }
}
