//! `key = value` configuration files and flag/config/default resolution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use anyhow::{bail, Context};

use crate::UsageError;

/// Parsed config file. Keys are long flag names without the dashes.
#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    used: Mutex<BTreeSet<String>>,
}

impl Config {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(UsageError(format!("config line {}: expected key = value, got `{raw}`", n + 1)));
            };
            let key = key.trim().trim_start_matches("--").to_string();
            if key.is_empty() {
                bail!(UsageError(format!("config line {}: empty key", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Config {
            values,
            used: Mutex::default(),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key)?;
        self.used.lock().unwrap().insert(key.to_string());
        Some(v)
    }

    /// Flag if given, else config entry, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> anyhow::Result<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            Some(text) => text
                .parse()
                .map(Some)
                .map_err(|e| UsageError(format!("config key `{key}`: cannot parse `{text}`: {e}")).into()),
            None => Ok(None),
        }
    }

    /// Keys that no resolution asked for.
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.lock().unwrap();
        self.values.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }
}

/// Comma-separated list, e.g. `20,30,40`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let items = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<T>().map_err(|e| format!("`{t}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_config_beats_default() {
        let cfg = Config::parse("# comment\nlr = 0.5\n--momentum=0.7  # trailing\n").unwrap();
        assert_eq!(cfg.pick(Some(0.1), "lr", 0.002).unwrap(), 0.1);
        assert_eq!(cfg.pick(None, "lr", 0.002).unwrap(), 0.5);
        assert_eq!(cfg.pick(None, "momentum", 0.99).unwrap(), 0.7);
        assert_eq!(cfg.pick(None, "margin", 0.2).unwrap(), 0.2);
        assert!(cfg.unused().is_empty());
    }

    #[test]
    fn bad_lines_and_values_are_usage_errors() {
        let err = Config::parse("lr 0.5").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        let cfg = Config::parse("epochs = many").unwrap();
        let err = cfg.pick::<usize>(None, "epochs", 1).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }

    #[test]
    fn unused_keys_are_reported() {
        let cfg = Config::parse("lr = 1\ntypo = 2").unwrap();
        let _ = cfg.pick::<f64>(None, "lr", 0.0).unwrap();
        assert_eq!(cfg.unused(), vec!["typo".to_string()]);
    }

    #[test]
    fn lists_parse() {
        assert_eq!("20, 30,40".parse::<List<usize>>().unwrap(), List(vec![20, 30, 40]));
        assert!("".parse::<List<usize>>().is_err());
        assert!("1,x".parse::<List<usize>>().is_err());
    }
}
