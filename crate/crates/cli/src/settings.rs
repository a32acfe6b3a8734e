//! Layered `key = value` settings: defaults, then a file, then flags.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use templatenet::training::parse_pairs;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pairs: Vec<(String, String)>,
}

impl Settings {
    /// Starts from `defaults` (which also fixes the set of known keys),
    /// applies the file if any, then every flag that was given.
    pub fn resolve(
        defaults: Vec<(String, String)>,
        file: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self> {
        let mut s = Self { pairs: defaults };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_pairs(&text).with_context(|| format!("parsing config {}", path.display()))? {
                s.set(&k, v).with_context(|| format!("in config {}", path.display()))?;
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: String) -> Result<()> {
        match self.pairs.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => {
                slot.1 = value;
                Ok(())
            }
            None => {
                let known: Vec<&str> = self.pairs.iter().map(|(k, _)| k.as_str()).collect();
                bail!("unknown setting {:?} (known: {})", key, known.join(", "))
            }
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("setting {} has no default", key))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| anyhow!("invalid {} = {:?}: {}", key, v, e))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// File form, readable again through `--config`.
    pub fn to_text(&self, command: &str) -> String {
        let mut s = format!("# templatenet {}\n", command);
        for (k, v) in &self.pairs {
            s.push_str(&format!("{} = {}\n", k, v));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> Vec<(String, String)> {
        vec![("a".into(), "1".into()), ("b".into(), "x".into())]
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        std::fs::write(&f, "a = 2\nb = y\n").unwrap();
        let s = Settings::resolve(defaults(), Some(&f), vec![("a", Some("3".into())), ("b", None)]).unwrap();
        assert_eq!(s.get("a"), "3");
        assert_eq!(s.get("b"), "y");
        let again = dir.path().join("again.cfg");
        std::fs::write(&again, s.to_text("test")).unwrap();
        assert_eq!(Settings::resolve(defaults(), Some(&again), vec![]).unwrap(), s);
    }

    #[test]
    fn unknown_keys_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        std::fs::write(&f, "zzz = 2\n").unwrap();
        assert!(Settings::resolve(defaults(), Some(&f), vec![]).is_err());
        assert!(Settings::resolve(defaults(), Some(&dir.path().join("missing.cfg")), vec![]).is_err());
    }
}
