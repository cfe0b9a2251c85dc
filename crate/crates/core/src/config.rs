//! Flat key-value configuration files with `#` comments, plus
//! flag > file > default resolution used by the CLI.
//!
//! ```text
//! # toy corpus
//! vocab_size = 30
//! seed = 42
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Ordered key-value map; keys keep first-appearance order so resolved
/// configs serialize deterministically.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = KvConfig::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Format(format!("config key '{key}': cannot parse '{v}'"))
            }),
        }
    }

    /// Value for `key` or `default` when absent.
    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get_parsed(key)?.unwrap_or(default))
    }

    /// Overlays `other` on top of `self` (other wins).
    pub fn merged_with(&self, other: &KvConfig) -> KvConfig {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.set(k, v);
        }
        out
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Serializes back to the file format, preserving insertion order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let cfg = KvConfig::parse("# header\n\nvocab_size = 30 # inline\nseed=42\n").unwrap();
        assert_eq!(cfg.get("vocab_size"), Some("30"));
        assert_eq!(cfg.get_or("seed", 0u64).unwrap(), 42);
        assert_eq!(cfg.get_or("missing", 7u64).unwrap(), 7);
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(KvConfig::parse("not a pair\n").is_err());
    }

    #[test]
    fn merge_prefers_overlay() {
        let base = KvConfig::parse("a = 1\nb = 2\n").unwrap();
        let over = KvConfig::parse("b = 9\nc = 3\n").unwrap();
        let m = base.merged_with(&over);
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("9"));
        assert_eq!(m.get("c"), Some("3"));
    }

    #[test]
    fn round_trips_deterministically() {
        let cfg = KvConfig::parse("one = 1\ntwo = 2\n").unwrap();
        let text = cfg.to_text();
        assert_eq!(text, KvConfig::parse(&text).unwrap().to_text());
    }

    #[test]
    fn bad_parse_is_reported_with_key() {
        let cfg = KvConfig::parse("n = abc\n").unwrap();
        let err = cfg.get_or("n", 1u32).unwrap_err();
        assert!(err.to_string().contains('n'));
    }
}
