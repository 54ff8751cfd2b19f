//! `key = value` configuration files. Command-line flags take precedence.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PmalError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, keys treat `-` and `_` alike.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PmalError::Csv {
                path: origin.to_path_buf(),
                line: n + 1,
                reason: "expected `key = value`".into(),
            })?;
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(PmalError::Csv {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    reason: "empty key".into(),
                });
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Settings { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                if !p.exists() {
                    return Err(PmalError::Validation(format!(
                        "config: {} does not exist",
                        p.display()
                    )));
                }
                let text = std::fs::read_to_string(p).map_err(|e| PmalError::io(p, e))?;
                Settings::parse(&text, p)
            }
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(String::as_str)
    }

    /// Flag value if given, else the config value, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| {
                PmalError::Validation(format!("{}: cannot parse `{s}`", normalize_key(key)))
            }),
        }
    }

    /// As [`Settings::pick`] with no default.
    pub fn pick_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|s| {
                s.parse().map_err(|_| {
                    PmalError::Validation(format!("{}: cannot parse `{s}`", normalize_key(key)))
                })
            })
            .transpose()
    }

    /// A switch is on if the flag is present or the config says `true`.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.pick(key, None, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let s = Settings::parse(
            "epsilon = 0.5\n# note\n\nlambda-p = 2 # inline\n",
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(s.pick("epsilon", None, 0.7).unwrap(), 0.5);
        assert_eq!(s.pick("epsilon", Some(0.9), 0.7).unwrap(), 0.9);
        assert_eq!(s.pick("lambda_p", None, 1.0).unwrap(), 2.0);
        assert_eq!(s.pick("margin", None, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn bad_values_name_the_key() {
        let s = Settings::parse("prototypes = ten", Path::new("c")).unwrap();
        let err = s.pick::<usize>("prototypes", None, 10).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("prototypes"));
        assert!(Settings::parse("no equals sign", Path::new("c")).is_err());
    }

    #[test]
    fn switches() {
        let s = Settings::parse("normalize = true", Path::new("c")).unwrap();
        assert!(s.switch("normalize", false).unwrap());
        assert!(!Settings::default().switch("normalize", false).unwrap());
    }
}
