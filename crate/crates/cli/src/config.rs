//! Flat JSON configuration.
//!
//! Settings structs are nested in code, but users write one flat object whose
//! keys are the leaf field names. A leaf name shared by several nested
//! structs (e.g. `seed`) sets all of them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use seal_core::{Result, SealError};

pub type Flat = Map<String, Value>;

/// Reads a flat JSON object; nested objects are rejected.
pub fn read_flat(path: &Path) -> Result<Flat> {
    if !path.exists() {
        return Err(SealError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| SealError::io(path, e))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| SealError::Config(format!("{}: invalid JSON: {e}", path.display())))?;
    let Value::Object(map) = v else {
        return Err(SealError::Config(format!("{}: expected a JSON object", path.display())));
    };
    if let Some((k, _)) = map.iter().find(|(_, v)| v.is_object()) {
        return Err(SealError::Config(format!("{}: key `{k}` is nested; config keys are flat", path.display())));
    }
    Ok(map)
}

fn leaves(v: &Value, path: &mut Vec<String>, out: &mut BTreeMap<String, Vec<Vec<String>>>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                path.push(k.clone());
                leaves(child, path, out);
                path.pop();
            }
        }
        _ => {
            if let Some(last) = path.last() {
                out.entry(last.clone()).or_default().push(path.clone());
            }
        }
    }
}

/// Leaf key → every path where it occurs.
pub fn leaf_paths<T: Serialize>(defaults: &T) -> BTreeMap<String, Vec<Vec<String>>> {
    let v = serde_json::to_value(defaults).expect("settings serialize");
    let mut out = BTreeMap::new();
    leaves(&v, &mut Vec::new(), &mut out);
    out
}

fn set(v: &mut Value, path: &[String], new: Value) {
    let mut cur = v;
    for k in path {
        cur = cur.get_mut(k).expect("path came from the same value");
    }
    *cur = new;
}

/// Applies `flat` over `defaults`; unknown keys are reported by name.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, flat: &Flat) -> Result<T> {
    let paths = leaf_paths(defaults);
    let mut v = serde_json::to_value(defaults).expect("settings serialize");
    let unknown: Vec<&str> = flat.keys().filter(|k| !paths.contains_key(*k)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(SealError::Config(format!("unknown config key(s): {}", unknown.join(", "))));
    }
    for (k, new) in flat {
        for p in &paths[k] {
            set(&mut v, p, new.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| SealError::Config(format!("bad config value: {e}")))
}

/// Unwraps a required key.
pub fn require<T: Clone>(value: &Option<T>, key: &str, flag: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| SealError::Config(format!("missing config key `{key}` (set it in --config or pass {flag})")))
}
