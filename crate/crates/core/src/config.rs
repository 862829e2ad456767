//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. For single-valued
//! keys the last occurrence wins; [`KeyValues::get_all`] returns every
//! occurrence. Lists are comma separated.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, TcvcError};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(body, _)| body).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TcvcError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(TcvcError::Config(format!("line {}: empty key", lineno + 1)));
            }
            kv.entries.push((k.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TcvcError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.retain(|(k, _)| k != key);
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'s>(&'s self, key: &'s str) -> impl Iterator<Item = &'s str> + 's {
        self.entries
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Distinct keys in first-appearance order.
    pub fn keys(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (k, _) in &self.entries {
            if !out.contains(&k.as_str()) {
                out.push(k);
            }
        }
        out
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| TcvcError::Config(format!("missing key '{key}'")))?;
        v.parse()
            .map_err(|_| TcvcError::Config(format!("bad value for '{key}': '{v}'")))
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            Some(_) => self.parse(key),
            None => Ok(default),
        }
    }

    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self
            .get(key)
            .ok_or_else(|| TcvcError::Config(format!("missing key '{key}'")))?;
        parse_list(v).map_err(|_| TcvcError::Config(format!("bad list for '{key}': '{v}'")))
    }
}

/// Comma-separated values; empty items are rejected.
pub fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    s.split(',').map(|x| x.trim().parse()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KeyValues::parse_str("# c\n\na = 1\nb= x y \na=2  # trailing\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.keys(), ["a", "b", "list"]);
        assert_eq!(kv.parse::<i32>("a").unwrap(), 2);
        assert_eq!(kv.get_all("a").collect::<Vec<_>>(), ["1", "2"]);
        assert_eq!(kv.get("b"), Some("x y"));
        assert_eq!(kv.parse_list::<usize>("list").unwrap(), [1, 2, 3]);
        assert_eq!(kv.parse_or("zz", 7u8).unwrap(), 7);
    }

    #[test]
    fn rejects_malformed() {
        assert!(KeyValues::parse_str("novalue").is_err());
        assert!(KeyValues::parse_str(" = 3").is_err());
        let kv = KeyValues::parse_str("a = q").unwrap();
        assert!(kv.parse::<f64>("a").is_err());
        assert!(kv.parse::<f64>("b").is_err());
        assert!(KeyValues::parse_str("l = 1,,2").unwrap().parse_list::<u32>("l").is_err());
    }
}
