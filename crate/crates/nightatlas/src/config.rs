//! Settings resolution: flags, then `NIGHTATLAS_*` environment variables,
//! then a JSON config file, then built-in defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "NIGHTATLAS_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Env,
    Config,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::Config => "config",
            Source::Default => "default",
        };
        f.write_str(s)
    }
}

/// A bad setting value or an unreadable config file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct SettingError(pub String);

/// The fully resolved settings of one invocation, as written to a run
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub settings: BTreeMap<String, Value>,
    pub sources: BTreeMap<String, Source>,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("settings serialize") + "\n"
    }
}

/// Reads a config file. Both a flat `{key: value}` object and a saved
/// [`RunConfig`] (whose `settings` are used) are accepted.
pub fn load_config_file(path: &Path) -> Result<Map<String, Value>, SettingError> {
    let text = fs::read_to_string(path).map_err(|e| SettingError(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| SettingError(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(mut map) => match map.remove("settings") {
            Some(Value::Object(settings)) if map.contains_key("command") => Ok(settings),
            Some(other) => {
                map.insert("settings".into(), other);
                Ok(map)
            }
            None => Ok(map),
        },
        _ => Err(SettingError(format!("{}: config must be a JSON object", path.display()))),
    }
}

/// Collects resolved settings for one command.
pub struct Resolver {
    file: Map<String, Value>,
    config: RunConfig,
}

impl Resolver {
    pub fn new(command: &str, file: Map<String, Value>) -> Self {
        Self { file, config: RunConfig { command: command.into(), ..RunConfig::default() } }
    }

    /// Resolves `key`. `given` is the flag or environment value (with its
    /// source) if either was supplied.
    pub fn resolve<T>(&mut self, key: &str, given: Option<(T, Source)>, default: T) -> Result<T, SettingError>
    where
        T: Serialize + DeserializeOwned,
    {
        let (value, source) = match given {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(v) => {
                    let parsed = serde_json::from_value(v.clone())
                        .map_err(|e| SettingError(format!("config value for `{key}`: {e}")))?;
                    (parsed, Source::Config)
                }
                None => (default, Source::Default),
            },
        };
        self.record(key, &value, source);
        Ok(value)
    }

    /// Like [`Resolver::resolve`] for settings without a default.
    pub fn require<T>(&mut self, key: &str, given: Option<(T, Source)>) -> Result<T, SettingError>
    where
        T: Serialize + DeserializeOwned,
    {
        let found = match given {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(v) => Some((
                    serde_json::from_value(v.clone()).map_err(|e| SettingError(format!("config value for `{key}`: {e}")))?,
                    Source::Config,
                )),
                None => None,
            },
        };
        let (value, source) = found.ok_or_else(|| {
            SettingError(format!("missing required setting `{key}` (flag --{}, env {ENV_PREFIX}{})", key.replace('_', "-"), key.to_uppercase()))
        })?;
        self.record(key, &value, source);
        Ok(value)
    }

    fn record<T: Serialize>(&mut self, key: &str, value: &T, source: Source) {
        self.config.settings.insert(key.into(), serde_json::to_value(value).expect("setting serializes"));
        self.config.sources.insert(key.into(), source);
    }

    pub fn finish(self) -> RunConfig {
        self.config
    }
}

/// One `key = value (source)` line per setting.
pub fn describe(config: &RunConfig) -> String {
    let mut out = format!("{} settings:\n", config.command);
    for (key, value) in &config.settings {
        let source = config.sources.get(key).copied().unwrap_or(Source::Default);
        out.push_str(&format!("  {key} = {value} ({source})\n"));
    }
    out
}
