//! TOML config files with dotted `key=value` overrides.
//!
//! Precedence: command-line overrides, then the file, then built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::CliError;

pub fn read_table(path: Option<&Path>) -> Result<(Table, Option<String>), CliError> {
    let Some(path) = path else {
        return Ok((Table::new(), None));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::UnreadableFile(format!("{}: {e}", path.display())))?;
    let table = text
        .parse::<Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((table, Some(text)))
}

/// Parses `V` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<(), CliError> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not KEY=VALUE")))?;
        set_path(table, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

pub fn decode<T: DeserializeOwned>(table: Table) -> Result<T, CliError> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
}
