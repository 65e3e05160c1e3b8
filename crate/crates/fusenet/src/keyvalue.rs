//! Flat `key = value` text files with `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

/// Parsed key/value pairs. Keys are consumed as they are read so leftovers
/// can be reported as unknown.
#[derive(Debug, Clone)]
pub struct KeyValues {
    path: PathBuf,
    entries: BTreeMap<String, Entry>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let syntax = |msg: String| Error::Syntax {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected `key = value`, found `{content}`")))?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(syntax(format!("invalid key `{key}`")));
            }
            let entry = Entry {
                value: v.trim().to_string(),
                line,
            };
            if let Some(prev) = entries.insert(key.to_string(), entry) {
                return Err(syntax(format!("duplicate key `{key}` (first set on line {})", prev.line)));
            }
        }
        Ok(KeyValues {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Directory relative paths in values are resolved against.
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new(""))
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|e| e.value)
    }

    /// Removes and returns every entry whose key starts with `prefix`,
    /// keyed by the remainder.
    pub fn take_prefixed(&mut self, prefix: &str) -> BTreeMap<String, String> {
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).expect("listed key").value;
                (k[prefix.len()..].to_string(), v)
            })
            .collect()
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key).map(|v| parse_value(key, &v)).transpose()
    }

    pub fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|v| self.base_dir().join(v))
    }

    /// Fails on the first key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, e)) => Err(Error::Syntax {
                path: self.path,
                line: e.line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

/// Splits a comma-separated list, dropping empty items.
pub fn list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
