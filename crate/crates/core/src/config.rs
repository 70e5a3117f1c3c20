//! Flat `section.key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once. Every key must be consumed by the reader, otherwise
//! [`KeyValues::finish`] reports it as unknown.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    used: bool,
}

#[derive(Debug, Clone)]
pub struct KeyValues {
    origin: String,
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Config {
                    origin: origin.to_string(),
                    line,
                    reason: format!("expected `key = value`, got `{trimmed}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config {
                    origin: origin.to_string(),
                    line,
                    reason: "empty key".into(),
                });
            }
            let entry = Entry {
                value: value.trim().to_string(),
                line,
                used: false,
            };
            if entries.insert(key.to_string(), entry).is_some() {
                return Err(Error::Config {
                    origin: origin.to_string(),
                    line,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KeyValues {
            origin: origin.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&path.display().to_string(), &text)
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    /// Raw string value, marking the key consumed.
    pub fn take_str(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(key).map(|e| {
            e.used = true;
            (e.value.clone(), e.line)
        })
    }

    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(None),
            Some((value, line)) => value.parse::<T>().map(Some).map_err(|e| Error::Config {
                origin: self.origin.clone(),
                line,
                reason: format!("`{key}`: cannot parse `{value}`: {e}"),
            }),
        }
    }

    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Keys present in the file, in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        let unused = self
            .entries
            .into_iter()
            .filter(|(_, e)| !e.used)
            .min_by_key(|(_, e)| e.line);
        match unused {
            None => Ok(()),
            Some((key, e)) => Err(Error::UnknownKey {
                origin: self.origin,
                line: e.line,
                key,
            }),
        }
    }
}
