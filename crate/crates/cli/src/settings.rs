//! Flag / config-file / default resolution.
//!
//! The config file is flat `key = value` text; `#` starts a comment. Keys
//! are the long flag names. Every key in the file must be used by the
//! command, so typos fail loudly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use cicbench::{Error, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().trim_start_matches("--").to_string();
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("config line {}: `{key}` set twice", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }
}

/// Resolves each setting once and records the result for the manifest.
pub struct Settings {
    file: ConfigFile,
    used: BTreeSet<String>,
    pub resolved: BTreeMap<String, Value>,
}

impl Settings {
    pub fn new(file: ConfigFile) -> Self {
        Settings {
            file,
            used: BTreeSet::new(),
            resolved: BTreeMap::new(),
        }
    }

    pub fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.values.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| Error::Config(format!("config `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.record(key, v);
        }
        Ok(value)
    }

    pub fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + Serialize,
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| Error::Config(format!("missing required setting --{key}")))
    }

    pub fn record<T: Serialize>(&mut self, key: &str, value: &T) {
        let v = serde_json::to_value(value).expect("serializable setting");
        self.resolved.insert(key.to_string(), v);
    }

    /// Fail on config keys the command never asked for.
    pub fn finish(&self) -> Result<()> {
        let unused: Vec<&str> = self
            .file
            .values
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown config keys: {}", unused.join(", "))))
        }
    }
}
