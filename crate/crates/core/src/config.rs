//! `key = value` text configs with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.insert(k.to_string(), (i + 1, v.trim().to_string()));
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of `key`, if present.
    pub fn get<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|e: V::Err| Error::Parse {
                path: self.path.clone(),
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Keys not in `known`, for typo detection.
    pub fn unknown_keys(&self, known: &[&str]) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .cloned()
            .collect()
    }

    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        let bad = self.unknown_keys(known);
        match bad.first() {
            None => Ok(()),
            Some(k) => Err(Error::Parse {
                path: self.path.clone(),
                line: self.entries[k].0,
                message: format!("unknown key {k:?}"),
            }),
        }
    }
}
