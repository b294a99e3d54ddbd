//! Flat `key = value` text files, used for run configs and manifests.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique,
//! non-empty and free of whitespace; values are trimmed.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Decode(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    n + 1
                )));
            };
            kv.insert(key.trim(), value.trim())
                .map_err(|e| Error::Decode(format!("line {}: {e}", n + 1)))?;
        }
        Ok(kv)
    }

    fn check_key(key: &str) -> Result<()> {
        if key.is_empty() || key.chars().any(|c| c.is_whitespace() || c == '=' || c == '#') {
            return Err(Error::Decode(format!("invalid key {key:?}")));
        }
        Ok(())
    }

    /// Add a new key; duplicates are an error.
    pub fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        Self::check_key(key)?;
        if value.contains('\n') {
            return Err(Error::Decode(format!("value for {key:?} spans lines")));
        }
        if self.get(key).is_some() {
            return Err(Error::Decode(format!("duplicate key {key:?}")));
        }
        self.entries.push((key.to_string(), value.to_string()));
        Ok(())
    }

    /// Insert or replace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        Self::check_key(key)?;
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Parse a typed value if the key is present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    pub fn render(&self) -> String {
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

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(raw: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("list item {s:?}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KvFile::parse("# run\n\nepochs = 30\n  lr=0.001  \nname = a = b\n").unwrap();
        assert_eq!(kv.get("epochs"), Some("30"));
        assert_eq!(kv.get("lr"), Some("0.001"));
        assert_eq!(kv.get("name"), Some("a = b"));
        assert_eq!(kv.require::<usize>("epochs").unwrap(), 30);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
        assert!(KvFile::parse("just words\n").is_err());
        assert!(KvFile::parse(" = 3\n").is_err());
        assert!(KvFile::parse("two words = 3\n").is_err());
    }

    #[test]
    fn typed_errors_name_the_key() {
        let kv = KvFile::parse("epochs = many\n").unwrap();
        let msg = kv.require::<usize>("epochs").unwrap_err().to_string();
        assert!(msg.contains("epochs"), "{msg}");
    }

    #[test]
    fn render_parses_back() {
        let kv = KvFile::parse("b = 2\na = x,y\n").unwrap();
        assert_eq!(KvFile::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<f64>("0.1, 0.2,0.3").unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(parse_list::<usize>("1,x").is_err());
    }
}
