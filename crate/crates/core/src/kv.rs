//! Flat `key = value` text used for configs and checkpoint shape headers.
//! Blank lines and `#` comments are ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: format!("expected `key = value`, found '{line}'"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: "empty key".into(),
                });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KvMap { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse {key} = '{v}'"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some("") => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("cannot parse element '{x}' of {key}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on any key outside `known`, which catches typos in config files.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return Err(Error::Config(format!("unknown key {k}")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let kv =
            KvMap::parse("# header\nbeta = 5\n\nname=loose # trailing\nlist = 1, 2,3\n").unwrap();
        assert_eq!(kv.get::<f64>("beta").unwrap(), Some(5.0));
        assert_eq!(kv.raw("name"), Some("loose"));
        assert_eq!(kv.get_list::<u32>("list").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(kv.get::<f64>("missing").unwrap(), None);
        assert!(kv.get::<f64>("name").is_err());
        assert!(kv.reject_unknown(&["beta", "name"]).is_err());
    }

    #[test]
    fn malformed_line_reports_number() {
        assert!(matches!(
            KvMap::parse("a = 1\noops\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut kv = KvMap::default();
        kv.set("x", 0.1);
        kv.set("y", "a,b");
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
    }
}
