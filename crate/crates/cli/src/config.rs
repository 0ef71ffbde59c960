//! Run configuration assembly: preset, config file, environment and flags.
//!
//! Config files are TOML. Top-level tables and dotted keys address nested
//! fields (`meta.alpha = 0.001` or `[meta]` / `alpha = 0.001`). A file that
//! is not valid TOML is read as flat `key=value` lines where values that do
//! not parse as TOML are taken as strings (`method=taco`). Lines starting
//! with `#` are comments.

use std::fs;
use std::path::Path;

use serde_json::Value;
use taco_core::experiment::RunConfig;
use taco_core::{Error, Result};

pub const OUTPUT_ROOT_ENV: &str = "TACO_OUTPUT_ROOT";

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "standard" => Ok(RunConfig::default()),
        "desk" => Ok(RunConfig::desk_synth()),
        other => Err(Error::config(format!("unknown preset `{other}` (expected standard or desk)"))),
    }
}

/// TOML scalar or array, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            other => out.push((key, serde_json::to_value(other)?)),
        }
    }
    Ok(())
}

/// Key/value assignments of a config file, in file order for flat files.
pub fn read_file(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    match toml::from_str::<toml::Table>(&text) {
        Ok(table) => flatten("", &table, &mut out)?,
        Err(toml_err) => {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::config(format!("{}:{}: expected key=value ({toml_err})", path.display(), i + 1))
                })?;
                out.push((k.trim().to_string(), parse_value(v)));
            }
        }
    }
    Ok(out)
}

/// Parses a `key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), parse_value(v)))
}

/// Sets the dotted `key` inside `root`; every path segment must already exist.
pub fn assign(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("`{}` is not a table", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

pub fn apply(cfg: &RunConfig, assignments: &[(String, Value)]) -> Result<RunConfig> {
    let mut root = serde_json::to_value(cfg)?;
    for (k, v) in assignments {
        assign(&mut root, k, v.clone())?;
    }
    serde_json::from_value(root).map_err(|e| Error::config(e.to_string()))
}
