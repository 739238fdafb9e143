//! Flat key-value config files and the flag > config > default precedence.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank
//! lines ignored. Keys use the long option names without the leading
//! dashes.

use std::collections::HashMap;
use std::path::Path;

use trajpred::{Error, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Data(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    /// CLI flag wins, then the config file, then the built-in default.
    pub fn resolve<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Data(format!("config key '{key}': cannot parse '{raw}'"))),
            None => Ok(default),
        }
    }

    /// Like `resolve` for values that stay optional.
    pub fn resolve_opt(&self, flag: Option<String>, key: &str) -> Option<String> {
        flag.or_else(|| self.get(key).map(|s| s.to_string()))
    }
}

/// Comma-separated list of floats.
pub fn parse_f64_list(raw: &str, what: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("{what}: cannot parse '{s}' as a number")))
        })
        .collect()
}

/// Bins written as `start:end` pairs, comma separated.
pub fn parse_bins(raw: &str) -> Result<Vec<(f64, f64)>> {
    raw.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Data(format!("bin '{pair}' must be start:end")))?;
            Ok((
                a.trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("bin start '{a}'")))?,
                b.trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("bin end '{b}'")))?,
            ))
        })
        .collect()
}
