//! `key = value` configuration text.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Keys are unique. Typed getters consume keys so that [`KvMap::finish`] can
//! reject anything left unrecognised.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{validation, Result};

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    source: String,
}

impl KvMap {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| validation(format!("{source}:{}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(validation(format!("{source}:{}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries, source: source.to_string() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn from_pairs(pairs: &[(String, String)], source: &str) -> Result<Self> {
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        Self::parse(&text, source)
    }

    /// Removes and parses `key`, falling back to `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| validation(format!("{}: bad value {v:?} for {key}: {e}", self.source))),
        }
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Comma-separated list; absent key yields `default`.
    pub fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| validation(format!("{}: bad list item {p:?} for {key}: {e}", self.source)))
                })
                .collect(),
        }
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(validation(format!("{}: unknown key {k}", self.source))),
        }
    }
}

pub(crate) fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Renders pairs as config text that [`KvMap::parse`] reads back.
pub fn render(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
