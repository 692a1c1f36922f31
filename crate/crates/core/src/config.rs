//! Key-value config files: `key = value` lines, `#` comments.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Parsed config with typed accessors. Every key read is recorded so callers
/// can reject unknown keys.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': bad integer '{v}'"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': bad integer '{v}'"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': bad number '{v}'"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::Config(format!("key '{key}': bad boolean '{v}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types() {
        let cfg = KvConfig::parse("a = 3\nb = 0.5 # trailing\n# full comment\nc = hello\n").unwrap();
        assert_eq!(cfg.get_usize("a", 0).unwrap(), 3);
        assert_eq!(cfg.get_f64("b", 0.0).unwrap(), 0.5);
        assert_eq!(cfg.get("c"), Some("hello"));
        assert_eq!(cfg.get_usize("missing", 9).unwrap(), 9);
        assert!(cfg.get_usize("c", 0).is_err());
        assert!(KvConfig::parse("no equals sign").is_err());
    }
}
