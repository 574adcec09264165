use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DlnError, Result};

/// Ordered `key=value` pairs.
pub type KeyValues = BTreeMap<String, String>;

/// Parse `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str, origin: &Path) -> Result<KeyValues> {
    let mut out = KeyValues::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DlnError::format(origin, format!("line {}: expected key=value, got '{raw}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(DlnError::format(origin, format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(DlnError::format(origin, format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| DlnError::io(path, e))?;
    parse_key_values(&text, path)
}

pub fn write_key_values(path: &Path, values: &KeyValues) -> Result<()> {
    let mut text = String::new();
    for (k, v) in values {
        let _ = writeln!(text, "{k} = {v}");
    }
    std::fs::write(path, text).map_err(|e| DlnError::io(path, e))
}
