//! Plain-text key-value config files.
//!
//! One `key = value` assignment per line, `#` starting a comment. Every
//! training hyperparameter is addressable under its struct field name or
//! its command-line alias, and explicit command-line flags win over file
//! values. Unknown or duplicate keys are rejected so typos fail loudly
//! instead of silently training with defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::anyhow;

use crate::Failure;

pub struct ConfigFile {
    path: PathBuf,
    /// key -> (raw value, line number), still unconsumed.
    values: BTreeMap<String, (String, usize)>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        Self { path: PathBuf::new(), values: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| {
            Failure::usage(anyhow!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (idx, raw_line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Failure::usage(anyhow!(
                    "{}:{lineno}: expected `key = value`, got {raw_line:?}",
                    path.display()
                )));
            };
            let key = key.trim().to_owned();
            let value = value.trim().to_owned();
            if key.is_empty() || value.is_empty() {
                return Err(Failure::usage(anyhow!(
                    "{}:{lineno}: empty key or value",
                    path.display()
                )));
            }
            if let Some((_, first)) = values.insert(key.clone(), (value, lineno)) {
                return Err(Failure::usage(anyhow!(
                    "{}:{lineno}: key {key:?} already set on line {first}",
                    path.display()
                )));
            }
        }
        Ok(Self { path: path.to_owned(), values })
    }

    /// Remove and return the raw value for the first present alias.
    pub fn take_raw(&mut self, aliases: &[&str]) -> Option<String> {
        for key in aliases {
            if let Some((value, _)) = self.values.remove(*key) {
                return Some(value);
            }
        }
        None
    }

    /// Remove and parse the value for the first present alias.
    pub fn take<T: FromStr>(&mut self, aliases: &[&str]) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        match self.take_raw(aliases) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                Failure::usage(anyhow!(
                    "{}: bad value {raw:?} for {}: {e}",
                    self.path.display(),
                    aliases[0]
                ))
            }),
        }
    }

    /// Error out on leftover keys so misspellings cannot pass silently.
    pub fn finish(self) -> Result<(), Failure> {
        if let Some((key, (_, lineno))) = self.values.into_iter().next() {
            return Err(Failure::usage(anyhow!(
                "{}:{lineno}: unknown config key {key:?}",
                self.path.display()
            )));
        }
        Ok(())
    }
}
