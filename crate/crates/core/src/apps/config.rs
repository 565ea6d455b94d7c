//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Keys are addressed as `section.key` (or bare `key` before any section).
//! Values may be quoted; `#` starts a comment. Every key must be consumed by
//! the demo that runs the config: leftovers are rejected with their line
//! number, which catches typos early.

use crate::{Error, Result};
use std::cell::RefCell;

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

/// Parsed configuration with consumption tracking.
#[derive(Debug)]
pub struct Config {
    entries: Vec<Entry>,
    consumed: RefCell<Vec<bool>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::BadConfig(format!("line {line_no}: unterminated section header"))
                })?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(Error::BadConfig(format!(
                        "line {line_no}: empty section name"
                    )));
                }
                continue;
            }
            let eq = line.find('=').ok_or_else(|| {
                Error::BadConfig(format!("line {line_no}: expected `key = value`"))
            })?;
            let key_part = line[..eq].trim();
            if key_part.is_empty() {
                return Err(Error::BadConfig(format!("line {line_no}: empty key")));
            }
            let mut value = line[eq + 1..].trim().to_string();
            if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
                value = value[1..value.len() - 1].to_string();
            }
            let key = if section.is_empty() {
                key_part.to_string()
            } else {
                format!("{section}.{key_part}")
            };
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::BadConfig(format!(
                    "line {line_no}: duplicate key {key:?}"
                )));
            }
            entries.push(Entry {
                key,
                value,
                line: line_no,
            });
        }
        let n = entries.len();
        Ok(Config {
            entries,
            consumed: RefCell::new(vec![false; n]),
        })
    }

    /// Overrides (or inserts) a key, e.g. from CLI flags.
    pub fn set(&mut self, key: &str, value: &str) {
        if let Some(pos) = self.entries.iter().position(|e| e.key == key) {
            self.entries[pos].value = value.to_string();
        } else {
            self.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line: 0,
            });
            self.consumed.borrow_mut().push(false);
        }
    }

    fn lookup(&self, key: &str) -> Option<(usize, &Entry)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.key == key)
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.lookup(key).map(|(i, e)| {
            self.consumed.borrow_mut()[i] = true;
            e.value.clone()
        })
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get_str(key).unwrap_or_else(|| default.to_string())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, kind: &str) -> Result<Option<T>> {
        match self.lookup(key) {
            None => Ok(None),
            Some((i, e)) => {
                self.consumed.borrow_mut()[i] = true;
                e.value.parse::<T>().map(Some).map_err(|_| {
                    Error::BadConfig(format!(
                        "line {}: key {key:?} expects {kind}, got {:?}",
                        e.line, e.value
                    ))
                })
            }
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.parse_as::<f64>(key, "a real number")?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self
            .parse_as::<usize>(key, "a non-negative integer")?
            .unwrap_or(default))
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self
            .parse_as::<u64>(key, "a non-negative integer")?
            .unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self.parse_as::<bool>(key, "true or false")?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn list_or(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.get_str(key) {
            Some(v) => v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            None => default.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Errors if any key was never consumed (unknown to the demo).
    pub fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (e, &used) in self.entries.iter().zip(consumed.iter()) {
            if !used {
                return Err(Error::BadConfig(format!(
                    "line {}: unknown key {:?}",
                    e.line, e.key
                )));
            }
        }
        Ok(())
    }

    /// Every key/value pair in file order (for run metadata).
    pub fn echo(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .map(|e| (e.key.clone(), e.value.clone()))
            .collect()
    }
}

fn strip_comment(line: &str) -> &str {
    // A `#` inside quotes does not start a comment.
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_types() {
        let cfg = Config::parse(
            "seed = 7\n[advection]\nbeta = 0.1 # default speed\nop = \"dt + beta*dx\"\n",
        )
        .unwrap();
        assert_eq!(cfg.u64_or("seed", 0).unwrap(), 7);
        assert_eq!(cfg.f64_or("advection.beta", 0.0).unwrap(), 0.1);
        assert_eq!(cfg.get_str("advection.op").unwrap(), "dt + beta*dx");
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_key_reported_with_line() {
        let cfg = Config::parse("seed = 7\nmystery = 3\n").unwrap();
        let _ = cfg.u64_or("seed", 0);
        match cfg.finish() {
            Err(Error::BadConfig(msg)) => {
                assert!(msg.contains("line 2"), "{msg}");
                assert!(msg.contains("mystery"), "{msg}");
            }
            other => panic!("expected BadConfig, got {other:?}"),
        }
    }

    #[test]
    fn type_errors_carry_line() {
        let cfg = Config::parse("[a]\nn = notanumber\n").unwrap();
        match cfg.f64_or("a.n", 1.0) {
            Err(Error::BadConfig(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(Config::parse("[broken\n").is_err());
        assert!(Config::parse("justtext\n").is_err());
    }

    #[test]
    fn cli_overrides() {
        let mut cfg = Config::parse("seed = 1\n").unwrap();
        cfg.set("seed", "9");
        cfg.set("out", "dir");
        assert_eq!(cfg.u64_or("seed", 0).unwrap(), 9);
        assert_eq!(cfg.get_str("out").unwrap(), "dir");
        cfg.finish().unwrap();
    }
}
