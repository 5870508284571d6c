//! Flat `key = value` settings files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every command declares the keys it understands and anything else is an error.

use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub entries: Vec<Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected `key = value`", i + 1))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(CliError::Usage(format!(
                    "config line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            entries.push(Entry {
                key,
                value: value.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!(
            "cannot read config file {}: {e}",
            path.display()
        )))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    /// Rejects any key outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), CliError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(CliError::Usage(format!(
                "config line {}: unknown key `{}` (expected one of: {})",
                e.line,
                e.key,
                known.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.get(key).map(|e| parse_value(e, &e.value)).transpose()
    }

    /// Comma-separated list of exactly `N` values.
    pub fn list<T: FromStr + Copy + Default, const N: usize>(
        &self,
        key: &str,
    ) -> Result<Option<[T; N]>, CliError> {
        let Some(e) = self.get(key) else {
            return Ok(None);
        };
        let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
        if parts.len() != N {
            return Err(CliError::Usage(format!(
                "config line {}: `{}` needs {N} comma-separated values, got {}",
                e.line,
                e.key,
                parts.len()
            )));
        }
        let mut out = [T::default(); N];
        for (slot, p) in out.iter_mut().zip(parts) {
            *slot = parse_value(e, p)?;
        }
        Ok(Some(out))
    }
}

fn parse_value<T: FromStr>(e: &Entry, text: &str) -> Result<T, CliError> {
    text.parse().map_err(|_| {
        CliError::Usage(format!(
            "config line {}: invalid value `{text}` for `{}`",
            e.line, e.key
        ))
    })
}
