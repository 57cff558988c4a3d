//! Plain-text `key=value` configuration files.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys keep their file order so that writing a parsed file back is stable.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    pairs: Vec<(String, String)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected key=value", lineno + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format("config", format!("line {}: empty key", lineno + 1)));
            }
            if kv.get(k).is_some() {
                return Err(Error::format("config", format!("line {}: duplicate key {k}", lineno + 1)));
            }
            kv.pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Inserts or replaces, keeping the first position of an existing key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.pairs.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    /// Parses `key` when present, otherwise returns `default`.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::config(format!("{key}={raw}: {e}"))),
        }
    }

    /// Fails on any key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::config(format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.pairs {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.pairs {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}
