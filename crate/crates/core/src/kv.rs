//! Flat key-value text format shared by config files and inline CLI arguments.
//!
//! Two layouts are accepted:
//!
//! ```text
//! # config file: one `key = value` pair per line, `#` starts a comment
//! family = normal
//! mu = 4
//! sigma = 3.5
//! ```
//!
//! and the inline form `family=normal mu=4 sigma=3.5` (pairs separated by
//! whitespace or `;`). List values are comma separated: `weights = 0.35, 0.65`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse either layout. A text containing newlines is read line by line,
    /// otherwise it is split on whitespace and `;`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::new();
        if text.contains('\n') {
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Format(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
                })?;
                map.insert_new(k.trim(), v.trim())?;
            }
        } else {
            for tok in text.split(|c: char| c.is_whitespace() || c == ';') {
                if tok.is_empty() {
                    continue;
                }
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("expected `key=value`, got `{tok}`")))?;
                map.insert_new(k.trim(), v.trim())?;
            }
        }
        Ok(map)
    }

    fn insert_new(&mut self, k: &str, v: &str) -> Result<()> {
        if k.is_empty() {
            return Err(Error::Format("empty key".into()));
        }
        if self.entries.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Format(format!("duplicate key `{k}`")));
        }
        Ok(())
    }

    pub fn insert(&mut self, k: impl Into<String>, v: impl ToString) {
        self.entries.insert(k.into(), v.to_string());
    }

    pub fn insert_list(&mut self, k: impl Into<String>, values: &[f64]) {
        let joined = values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        self.entries.insert(k.into(), joined);
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.entries.get(k).map(String::as_str)
    }

    pub fn require(&self, k: &str) -> Result<&str> {
        self.get(k).ok_or_else(|| Error::Format(format!("missing key `{k}`")))
    }

    pub fn f64(&self, k: &str) -> Result<f64> {
        parse_num(k, self.require(k)?)
    }

    pub fn f64_or(&self, k: &str, default: f64) -> Result<f64> {
        self.get(k).map_or(Ok(default), |v| parse_num(k, v))
    }

    pub fn opt<T: FromStr>(&self, k: &str) -> Result<Option<T>> {
        match self.get(k) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Format(format!("key `{k}`: cannot parse `{v}`"))),
        }
    }

    pub fn list(&self, k: &str) -> Result<Vec<f64>> {
        split_list(self.require(k)?)
            .map(|s| parse_num(k, s))
            .collect()
    }

    pub fn str_list(&self, k: &str) -> Option<Vec<String>> {
        self.get(k).map(|v| split_list(v).map(str::to_string).collect())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvMap {
        let dotted = format!("{prefix}.");
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copy every entry of `other` into `self` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multi-line `key = value` rendering.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Inline rendering, `key=value` pairs separated by single spaces.
impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.entries {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, "{k}={}", v.replace(' ', ""))?;
        }
        Ok(())
    }
}

/// Comma-separated values, optionally wrapped in `[...]`.
fn split_list(v: &str) -> impl Iterator<Item = &str> {
    let v = v.trim();
    let v = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')).unwrap_or(v);
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_num(k: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Format(format!("key `{k}`: `{v}` is not a number")))
}
