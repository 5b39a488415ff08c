//! `key = value` text configuration and human-readable byte sizes.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("invalid byte size `{0}`")]
    InvalidSize(String),
    #[error("{0}")]
    Invariant(String),
}

/// Parsed `key = value` lines. Blank lines and `#` comments are skipped.
#[derive(Debug, Default, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: idx + 1 });
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Rejects any key not in `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigError::InvalidValue {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn bytes(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.get(key).map(parse_bytes).transpose()
    }
}

pub const KB: u64 = 1024;
pub const MB: u64 = 1024 * KB;
pub const GB: u64 = 1024 * MB;

/// Parses sizes such as `4096`, `128K`, `128KB`, `1.5MB` or `1 GiB`.
/// Units are binary (K = 1024).
pub fn parse_bytes(text: &str) -> Result<u64, ConfigError> {
    let s = text.trim();
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let err = || ConfigError::InvalidSize(text.to_string());
    let value: f64 = num.parse().map_err(|_| err())?;
    let mult = match unit.trim().to_ascii_uppercase().as_str() {
        "" | "B" => 1,
        "K" | "KB" | "KIB" => KB,
        "M" | "MB" | "MIB" => MB,
        "G" | "GB" | "GIB" => GB,
        _ => return Err(err()),
    };
    let bytes = value * mult as f64;
    if !bytes.is_finite() || bytes < 0.0 || bytes.fract() != 0.0 {
        return Err(err());
    }
    Ok(bytes as u64)
}

pub fn format_bytes(bytes: u64) -> String {
    match bytes {
        b if b >= GB && b % GB == 0 => format!("{}GB", b / GB),
        b if b >= MB && b % MB == 0 => format!("{}MB", b / MB),
        b if b >= KB && b % KB == 0 => format!("{}KB", b / KB),
        b => format!("{b}B"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sizes() {
        assert_eq!(parse_bytes("4096"), Ok(4096));
        assert_eq!(parse_bytes("128K"), Ok(128 * KB));
        assert_eq!(parse_bytes("128KB"), Ok(128 * KB));
        assert_eq!(parse_bytes("1.5MB"), Ok(3 * MB / 2));
        assert_eq!(parse_bytes("1 GiB"), Ok(GB));
        assert!(parse_bytes("12XB").is_err());
        assert!(parse_bytes("").is_err());
        assert!(parse_bytes("0.3B").is_err());
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = KeyValues::parse("# header\n a = 1 \n\nb=2MB # trailing\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.bytes("b").unwrap(), Some(2 * MB));
        assert_eq!(kv.check_keys(&["a"]), Err(ConfigError::UnknownKey("b".into())));
        assert_eq!(KeyValues::parse("oops").unwrap_err(), ConfigError::Syntax { line: 1 });
    }

    #[test]
    fn format_round_trips() {
        for b in [1, 4096, 128 * KB, 5 * MB, GB, 1000] {
            assert_eq!(parse_bytes(&format_bytes(b)).unwrap(), b);
        }
    }
}
