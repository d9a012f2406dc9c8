//! `key=value` run settings: built-in defaults, overlaid by a `--config`
//! file, overlaid by explicit flags. The fully resolved map is written next
//! to each run's outputs and can be fed back through `--config`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    command: &'static str,
    values: BTreeMap<String, String>,
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped; keys
/// accept `-` or `_`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::input(format!("config line {}: expected key=value", i + 1)));
        };
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    /// `defaults` lists every key the command understands.
    pub fn resolve(
        command: &'static str,
        defaults: &[(&str, &str)],
        config_file: Option<&Path>,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> =
            defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
            for (k, v) in parse_config(&text)? {
                if !values.contains_key(&k) {
                    return Err(CliError::input(format!("unknown {command} setting '{k}'")));
                }
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            debug_assert!(values.contains_key(k), "flag {k} missing from defaults");
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { command, values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| CliError::input(format!("bad value '{}' for {key}: {e}", self.raw(key))))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(CliError::input(format!("bad boolean '{v}' for {key}"))),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::input(format!("bad item '{s}' in {key}: {e}")))
            })
            .collect()
    }

    /// A required path setting.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::input(format!(
                "{} needs --{}",
                self.command,
                key.replace('_', "-")
            ))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        let dir = PathBuf::from(self.raw("out"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::input(format!("creating {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn render(&self) -> String {
        let mut s = format!("# resolved {} settings\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Writes `<dir>/<command>.config`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("{}.config", self.command));
        std::fs::write(&path, self.render())
            .map_err(|e| CliError::input(format!("writing {}: {e}", path.display())))?;
        Ok(path)
    }
}
