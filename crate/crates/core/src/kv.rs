//! `key = value` text files with `#` comments.

use crate::error::{Error, Result};

/// One parsed assignment and its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        out.push(Entry {
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

impl Entry {
    pub fn parse<T: std::str::FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| self.invalid())
    }

    pub fn flag(&self) -> Result<bool> {
        match self.value.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(self.invalid()),
        }
    }

    pub fn invalid(&self) -> Error {
        Error::config(format!(
            "line {}: invalid value {:?} for {}",
            self.line, self.value, self.key
        ))
    }

    pub fn unknown(&self) -> Error {
        Error::config(format!("line {}: unknown key {}", self.line, self.key))
    }
}
