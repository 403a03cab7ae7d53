//! Flat `key=value` configuration files layered over serde config structs.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` override.
pub fn parse_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Returns `config` with each pair applied in order. Keys must name existing
/// fields; values are read according to the field's current type.
pub fn apply<C: Serialize + DeserializeOwned>(config: &C, pairs: &[(String, String)]) -> Result<C> {
    let mut obj = match serde_json::to_value(config)? {
        Value::Object(m) => m,
        _ => return Err(Error::Config("configuration is not a record".into())),
    };
    for (k, v) in pairs {
        let current = obj
            .get(k)
            .ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
        let parsed = parse_like(current, v).ok_or_else(|| Error::Config(format!("bad value `{v}` for `{k}`")))?;
        obj.insert(k.clone(), parsed);
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Config(e.to_string()))
}

fn parse_like(current: &Value, raw: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().map(Value::from),
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Null => Some(if raw == "none" {
            Value::Null
        } else if let Ok(u) = raw.parse::<u64>() {
            Value::from(u)
        } else if let Ok(f) = raw.parse::<f64>() {
            Value::from(f)
        } else {
            Value::String(raw.to_string())
        }),
        _ => serde_json::from_str(raw).ok(),
    }
}

/// `key=value` lines in field order.
pub fn render<C: Serialize>(config: &C) -> Result<String> {
    let Value::Object(obj) = serde_json::to_value(config)? else {
        return Err(Error::Config("configuration is not a record".into()));
    };
    Ok(render_map(&obj))
}

pub fn render_map(obj: &Map<String, Value>) -> String {
    let mut out = String::new();
    for (k, v) in obj {
        let text = match v {
            Value::String(s) => s.clone(),
            Value::Null => "none".to_string(),
            other => other.to_string(),
        };
        out.push_str(k);
        out.push('=');
        out.push_str(&text);
        out.push('\n');
    }
    out
}
