use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::ArgMatches;
use ini::Ini;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Keys naming files or runtime resources; left out of the config hash so
/// that moving files around does not change a model's provenance.
const UNHASHED: &[&str] = &["config", "threads", "data", "model", "truth", "out", "pace_out"];

/// Resolved key-value settings for one command: flags override the command's
/// config section, which overrides the unnamed top-level section. Unknown
/// keys are an error only inside the command's own section.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(section: &str, keys: &[&str], matches: &ArgMatches) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = matches.get_one::<String>("config") {
            let ini = Ini::load_from_file(Path::new(path))
                .map_err(|e| CliError::Usage(format!("cannot read config {path}: {e}")))?;
            for name in [None, Some(section)] {
                let Some(props) = ini.section(name) else { continue };
                for (k, v) in props.iter() {
                    // top-level keys are shared by all commands; each takes what it knows
                    if !keys.contains(&k) && name.is_none() {
                        continue;
                    }
                    if !keys.contains(&k) {
                        return Err(CliError::Usage(format!(
                            "unknown key '{k}' in section [{}] of {path}",
                            name.unwrap_or("")
                        )));
                    }
                    values.insert(k.to_string(), v.trim().to_string());
                }
            }
        }
        for &k in keys {
            if matches.value_source(k) == Some(ValueSource::CommandLine) {
                if let Some(v) = matches.get_one::<String>(k) {
                    values.insert(k.to_string(), v.clone());
                }
            }
        }
        Ok(Settings { values })
    }

    #[cfg(test)]
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Settings { values: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|s| !s.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.str(key).ok_or_else(|| CliError::Usage(format!("missing required setting '{key}'")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("invalid value '{v}' for '{key}'"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.str(key).map(str::to_ascii_lowercase).as_deref() {
            None => Ok(default),
            Some("true" | "yes" | "1" | "on") => Ok(true),
            Some("false" | "no" | "0" | "off") => Ok(false),
            Some(v) => Err(CliError::Usage(format!("invalid boolean '{v}' for '{key}'"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.str(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("invalid list '{v}' for '{key}'"))))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// SHA-256 over the sorted parameter settings, excluding paths.
    pub fn hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            if !UNHASHED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn typed_getters() {
        let s = Settings::from_pairs(&[("k", "3"), ("b", "yes"), ("l", "1, 2,3"), ("e", "")]);
        assert_eq!(s.get::<usize>("k").unwrap(), Some(3));
        assert!(s.flag("b", false).unwrap());
        assert!(!s.flag("missing", false).unwrap());
        assert_eq!(s.list::<usize>("l").unwrap(), Some(vec![1, 2, 3]));
        assert_eq!(s.str("e"), None);
        assert!(s.get::<f64>("b").is_err());
        assert!(s.required("nope").is_err());
    }

    #[test]
    fn hash_ignores_paths_and_order() {
        let a = Settings::from_pairs(&[("k", "2"), ("out", "a.json"), ("seed", "1")]);
        let b = Settings::from_pairs(&[("seed", "1"), ("k", "2"), ("out", "b.json")]);
        assert_eq!(a.hash("fit"), b.hash("fit"));
        assert_ne!(a.hash("fit"), a.hash("test"));
        let c = Settings::from_pairs(&[("k", "3"), ("seed", "1")]);
        assert_ne!(a.hash("fit"), c.hash("fit"));
    }
}
