//! Effective configuration: flags override the config file, which overrides defaults.

use std::path::Path;
use std::str::FromStr;

use dln_core::io::{write_key_values, KeyValues};
use log::warn;

use crate::CliError;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    values: KeyValues,
}

impl Settings {
    /// Keys in `file` that no default names are ignored with a warning.
    pub fn resolve(defaults: &[(&str, String)], file: Option<&KeyValues>, flags: Vec<(&str, Option<String>)>) -> Result<Self, CliError> {
        let mut values: KeyValues = defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(file) = file {
            for (k, v) in file {
                match values.get_mut(k) {
                    Some(slot) => *slot = v.clone(),
                    None => warn!("config key '{k}' is not used by this command"),
                }
            }
        }
        for (k, v) in flags {
            if !values.contains_key(k) {
                return Err(CliError::Usage(format!("internal: flag '{k}' has no default")));
            }
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Settings { values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::Usage(format!("invalid value '{}' for '{key}': {e}", self.raw(key))))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("invalid entry '{s}' in '{key}': {e}"))))
            .collect()
    }

    pub fn values(&self) -> &KeyValues {
        &self.values
    }

    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
        write_key_values(&dir.join(EFFECTIVE_CONFIG_FILE), &self.values)?;
        Ok(())
    }
}
