//! Strict flat config files: one `section.key = value` per line, `#`
//! comments. Every key must be consumed by the command reading the file;
//! leftovers abort with the offending key named.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use eca::EcaError;

pub struct Config {
    entries: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
    base_dir: PathBuf,
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, EcaError> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                EcaError::Config(format!("line {}: expected 'section.key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !key.contains('.') || key.starts_with('.') || key.ends_with('.') {
                return Err(EcaError::Config(format!(
                    "line {}: key '{key}' must look like section.key",
                    lineno + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(EcaError::Config(format!(
                    "line {}: duplicate key '{key}'",
                    lineno + 1
                )));
            }
        }
        Ok(Config {
            entries,
            consumed: BTreeSet::new(),
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, EcaError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn get_str(&mut self, key: &str) -> Option<String> {
        if let Some(v) = self.entries.get(key) {
            self.consumed.insert(key.to_string());
            Some(v.clone())
        } else {
            None
        }
    }

    /// Paths are resolved relative to the config file's directory.
    pub fn get_path(&mut self, key: &str) -> Option<PathBuf> {
        self.get_str(key).map(|v| {
            let p = PathBuf::from(&v);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        })
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64, EcaError> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| EcaError::Config(format!("key '{key}': '{v}' is not a number"))),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize, EcaError> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| EcaError::Config(format!("key '{key}': '{v}' is not an integer"))),
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool, EcaError> {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(EcaError::Config(format!(
                    "key '{key}': '{other}' is not a boolean"
                ))),
            },
        }
    }

    /// All keys with a given prefix (still must be consumed individually).
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Mark every key in a section as consumed; commands reusing a train
    /// config file ignore the sections they do not need.
    pub fn consume_section(&mut self, prefix: &str) {
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in keys {
            self.consumed.insert(k);
        }
    }

    /// Reject any key that no reader asked for.
    pub fn finish(&self) -> Result<(), EcaError> {
        for key in self.entries.keys() {
            if !self.consumed.contains(key) {
                return Err(EcaError::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }
}
