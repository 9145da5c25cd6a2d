//! Flat `key = value` configuration text with `#` comments.

use std::fmt::Display;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{key}`; valid keys: {}", valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },
    #[error("invalid value {value:?} for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Parses `key = value` lines. Blank lines and everything after `#` are ignored.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses an override of the form `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(ConfigError::Syntax {
            line: 0,
            text: s.to_string(),
        }),
    }
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        msg: e.to_string(),
    })
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            msg: "expected true or false".into(),
        }),
    }
}

/// Parses `HxW` (also accepts `H×W`).
pub fn parse_grid(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X', '×'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

pub(crate) fn unknown(key: &str, valid: &[&str]) -> ConfigError {
    ConfigError::UnknownKey {
        key: key.to_string(),
        valid: valid.iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_and_comments() {
        let p = parse_pairs("# header\nepochs = 5\n\n  lr=1e-3 # trailing\n").unwrap();
        assert_eq!(p, vec![("epochs".into(), "5".into()), ("lr".into(), "1e-3".into())]);
        assert!(matches!(parse_pairs("nonsense"), Err(ConfigError::Syntax { line: 1, .. })));
        assert_eq!(parse_grid("32x16"), Some((32, 16)));
        assert_eq!(parse_grid("8×8"), Some((8, 8)));
        assert_eq!(parse_grid("8"), None);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let msg = unknown("epoch", &["epochs", "seed"]).to_string();
        assert!(msg.contains("epoch") && msg.contains("epochs, seed"), "{msg}");
    }
}
