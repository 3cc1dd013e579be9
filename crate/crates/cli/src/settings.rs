//! Resolved command settings: defaults, then the `--config` file, then
//! command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bistil::kv::{self, KeyValues};

use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Debug)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

impl Settings {
    /// `known` lists every key the command accepts with its default
    /// (empty string for settings without one).
    pub fn resolve(
        command: &'static str,
        known: &[(&str, &str)],
        config: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            known.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        values.entry("seed".into()).or_insert_with(|| DEFAULT_SEED.to_string());
        if let Some(path) = config {
            let file: KeyValues = kv::read(path).map_err(|e| CliError::Usage(e.to_string()))?;
            for (k, v) in file {
                if !values.contains_key(&k) {
                    return Err(CliError::Usage(format!("{}: unknown setting {k:?} for {command}", path.display())));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Settings { command, values })
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    fn flag(key: &str) -> String {
        format!("--{}", key.replace('_', "-"))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        v.parse().map_err(|_| CliError::Usage(format!("{}: cannot parse {v:?}", Self::flag(key))))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(CliError::Usage(format!("{} requires {}", self.command, Self::flag(key))));
        }
        Ok(PathBuf::from(v))
    }

    /// A path that must already exist.
    pub fn existing(&self, key: &str) -> Result<PathBuf, CliError> {
        let p = self.path(key)?;
        if !p.exists() {
            return Err(CliError::Usage(format!("{} {}: no such file or directory", Self::flag(key), p.display())));
        }
        Ok(p)
    }

    pub fn optional_existing(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.existing(key).map(Some)
        }
    }

    /// Comma-separated list of existing paths.
    pub fn existing_list(&self, key: &str) -> Result<Vec<PathBuf>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let p = PathBuf::from(s);
                if p.exists() {
                    Ok(p)
                } else {
                    Err(CliError::Usage(format!("{} {s}: no such file or directory", Self::flag(key))))
                }
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn pairs(&self) -> &BTreeMap<String, String> {
        &self.values
    }
}
