//! Flat `key = value` configuration text.
//!
//! ```text
//! # comment
//! include base.conf      # path relative to the including file
//! task = stacking
//! ppo.gamma = 0.995
//! start.block_x = 0.22, 0.55
//! ```
//!
//! Later assignments override earlier ones, including those pulled in by
//! `include`. Values are untyped text until read.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

const MAX_INCLUDE_DEPTH: usize = 16;

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut m = Self::new();
        m.apply_text(text, None, 0)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::new();
        m.apply_file(path, 0)?;
        Ok(m)
    }

    fn apply_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(Error::Config(format!("include depth exceeded at {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text, path.parent(), depth)
    }

    fn apply_text(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let p = PathBuf::from(rest.trim());
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                };
                self.apply_file(&p, depth + 1)?;
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key `{k}`", n + 1)));
            }
            self.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse(key, default)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default)
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(default),
            Some("true" | "on" | "yes" | "1") => Ok(true),
            Some("false" | "off" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("`{key}`: expected a boolean, got `{v}`"))),
        }
    }

    /// Two comma-separated numbers.
    pub fn get_pair(&self, key: &str, default: (f64, f64)) -> Result<(f64, f64)> {
        let Some(v) = self.entries.get(key) else {
            return Ok(default);
        };
        let bad = || Error::Config(format!("`{key}`: expected `lo, hi`, got `{v}`"));
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        Ok((a, b))
    }

    /// Rejects keys outside `known` (exact names or `prefix.*` wildcards).
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for k in self.entries.keys() {
            let ok = known.iter().any(|p| match p.strip_suffix('*') {
                Some(pre) => k.starts_with(pre),
                None => k == p,
            });
            if !ok {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Canonical text: one sorted `key = value` per line, no includes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let m = KvMap::parse_str("a = 1 # one\n\n# skip\nb = x y\na = 2\n").unwrap();
        assert_eq!(m.get_str("a"), Some("2"));
        assert_eq!(m.get_str("b"), Some("x y"));
        assert_eq!(m.get_f64("a", 0.0).unwrap(), 2.0);
        assert_eq!(m.get_f64("missing", 7.5).unwrap(), 7.5);
    }

    #[test]
    fn includes_are_relative() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/base.conf"), "a = 1\nb = 2\n").unwrap();
        std::fs::write(dir.path().join("top.conf"), "include sub/base.conf\nb = 3\n").unwrap();
        let m = KvMap::load(&dir.path().join("top.conf")).unwrap();
        assert_eq!(m.get_usize("a", 0).unwrap(), 1);
        assert_eq!(m.get_usize("b", 0).unwrap(), 3);
    }

    #[test]
    fn include_cycle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.conf"), "include a.conf\n").unwrap();
        assert!(KvMap::load(&dir.path().join("a.conf")).is_err());
    }

    #[test]
    fn typed_errors() {
        let m = KvMap::parse_str("n = abc\nflag = maybe\nr = 1, x\n").unwrap();
        assert!(m.get_f64("n", 0.0).is_err());
        assert!(m.get_bool("flag", false).is_err());
        assert!(m.get_pair("r", (0.0, 0.0)).is_err());
        assert!(KvMap::parse_str("no equals sign\n").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let m = KvMap::parse_str("z = 1\na = hello world\n").unwrap();
        assert_eq!(KvMap::parse_str(&m.to_text()).unwrap(), m);
        assert!(m.check_known(&["z", "a"]).is_ok());
        assert!(m.check_known(&["z"]).is_err());
        assert!(m.check_known(&["z", "a*"]).is_ok());
    }
}
