//! Flat `key = value` documents used for model and training configs.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{AeroError, Result};

/// Parsed document that remembers which keys were read, so leftovers can be
/// rejected as unknown.
#[derive(Debug, Default)]
pub struct KvDoc {
    entries: BTreeMap<String, String>,
    taken: std::cell::RefCell<Vec<String>>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(AeroError::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, found `{line}`"),
                ));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(AeroError::config(format!("line {}", lineno + 1), "empty key"));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(AeroError::config(key, "duplicate key"));
            }
        }
        Ok(KvDoc { entries, taken: Default::default() })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.taken.borrow_mut().push(key.to_string());
        Some(v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| AeroError::config(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(AeroError::config(key, format!("expected a boolean, found `{v}`"))),
        }
    }

    /// Errors on the first key that no getter asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let taken = self.taken.borrow();
        match self.entries.keys().find(|k| !taken.contains(k)) {
            Some(k) => Err(AeroError::config(k.clone(), "unknown key")),
            None => Ok(()),
        }
    }
}

/// Renders ordered pairs as a document that [`KvDoc::parse`] reads back.
pub fn render(pairs: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}
