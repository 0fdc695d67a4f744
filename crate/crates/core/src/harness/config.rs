//! Run settings. Precedence: command-line flags, then environment, then the
//! config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use super::HarnessError;
use crate::checker::{CacheStore, CachedChecker, Checker, RemoteChecker, ScriptedChecker};
use crate::client::{ClientConfig, RemoteChatClient, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL};

/// `scripted:<rules.json>`, `remote`, or `cached:<inner spec>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckerSpec {
    Scripted(PathBuf),
    Remote,
    Cached(Box<CheckerSpec>),
}

impl std::str::FromStr for CheckerSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => Ok(Self::Scripted(PathBuf::from(path))),
            Some(("cached", inner)) => Ok(Self::Cached(Box::new(inner.parse()?))),
            None if s == "remote" => Ok(Self::Remote),
            _ => Err(HarnessError::Config(format!(
                "bad checker spec \"{s}\" (expected scripted:<rules.json>, remote, or cached:<spec>)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub checker: Option<CheckerSection>,
    pub seed: Option<u64>,
    pub cache_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct CheckerSection {
    /// Checker spec string, as on the command line.
    pub spec: Option<String>,
    #[serde(flatten)]
    pub client: ClientConfig,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub checker: Option<String>,
    pub seed: Option<u64>,
    pub cache_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub checker: Option<CheckerSpec>,
    pub seed: u64,
    pub cache_path: Option<PathBuf>,
    pub client: ClientConfig,
}

impl Settings {
    /// `env` looks up an environment variable; injected for testing.
    pub fn resolve(
        cli: CliOverrides,
        env: impl Fn(&str) -> Option<String>,
        file: FileConfig,
    ) -> Result<Self, HarnessError> {
        let section = file.checker.unwrap_or_default();
        let mut client = section.client;
        let env = |k: &str| env(k).filter(|v| !v.is_empty());
        let layer = |slot: &mut Option<String>, cli: Option<String>, var: &str| {
            if let Some(v) = cli.or_else(|| env(var)) {
                *slot = Some(v);
            }
        };
        layer(&mut client.endpoint, cli.endpoint, ENV_ENDPOINT);
        layer(&mut client.api_key, cli.api_key, ENV_API_KEY);
        layer(&mut client.model, cli.model, ENV_MODEL);
        let checker = cli
            .checker
            .or(section.spec)
            .map(|s| s.parse())
            .transpose()?;
        Ok(Settings {
            checker,
            seed: cli.seed.or(file.seed).unwrap_or(0),
            cache_path: cli.cache_path.or(file.cache_path),
            client,
        })
    }

    pub fn from_process(cli: CliOverrides, config_path: Option<&Path>) -> Result<Self, HarnessError> {
        let file = match config_path {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Self::resolve(cli, |k| std::env::var(k).ok(), file)
    }

    pub fn build_checker(&self) -> Result<Box<dyn Checker>, HarnessError> {
        let spec = self
            .checker
            .as_ref()
            .ok_or_else(|| HarnessError::Config("no checker configured".into()))?;
        self.build(spec)
    }

    fn build(&self, spec: &CheckerSpec) -> Result<Box<dyn Checker>, HarnessError> {
        match spec {
            CheckerSpec::Scripted(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                let c = ScriptedChecker::from_rule_file(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                Ok(Box::new(c))
            }
            CheckerSpec::Remote => {
                let client = RemoteChatClient::from_config(self.client.clone())
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(Box::new(RemoteChecker::new(client)))
            }
            CheckerSpec::Cached(inner) => {
                let store = match &self.cache_path {
                    Some(p) => CacheStore::open(p),
                    None => {
                        log::warn!("no cache_path set; caching in memory only");
                        CacheStore::in_memory()
                    }
                };
                Ok(Box::new(CachedChecker::new(self.build(inner)?, Arc::new(store))))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn checker_spec_parsing() {
        assert_eq!("remote".parse::<CheckerSpec>().unwrap(), CheckerSpec::Remote);
        assert_eq!(
            "cached:scripted:r.json".parse::<CheckerSpec>().unwrap(),
            CheckerSpec::Cached(Box::new(CheckerSpec::Scripted("r.json".into())))
        );
        assert!("scripted:".parse::<CheckerSpec>().is_err());
        assert!("oracle".parse::<CheckerSpec>().is_err());
    }

    #[test]
    fn precedence_cli_env_file() {
        let file = FileConfig::parse(
            r#"{"checker":{"spec":"remote","endpoint":"http://file","model":"file-model","max_attempts":5},
                "seed":7,"cache_path":"file.jsonl"}"#,
        )
        .unwrap();
        let s = Settings::resolve(CliOverrides::default(), env(&[]), file.clone()).unwrap();
        assert_eq!((s.seed, s.client.endpoint.as_deref(), s.client.max_attempts), (7, Some("http://file"), 5));

        let s = Settings::resolve(CliOverrides::default(), env(&[(ENV_ENDPOINT, "http://env"), (ENV_MODEL, "")]), file.clone()).unwrap();
        assert_eq!(s.client.endpoint.as_deref(), Some("http://env"));
        assert_eq!(s.client.model.as_deref(), Some("file-model"));

        let cli = CliOverrides { endpoint: Some("http://cli".into()), seed: Some(1), checker: Some("scripted:x.json".into()), ..Default::default() };
        let s = Settings::resolve(cli, env(&[(ENV_ENDPOINT, "http://env")]), file).unwrap();
        assert_eq!(s.client.endpoint.as_deref(), Some("http://cli"));
        assert_eq!(s.seed, 1);
        assert_eq!(s.checker, Some(CheckerSpec::Scripted("x.json".into())));
        assert_eq!(s.cache_path, Some(PathBuf::from("file.jsonl")));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(FileConfig::parse(r#"{"sead": 1}"#).is_err());
    }

    #[test]
    fn builds_cached_scripted_checker() {
        let dir = tempfile::tempdir().unwrap();
        let rules = dir.path().join("rules.json");
        std::fs::write(&rules, r#"[{"action_pattern":"jump","label":"true"}]"#).unwrap();
        let cache = dir.path().join("cache.jsonl");
        let cli = CliOverrides {
            checker: Some(format!("cached:scripted:{}", rules.display())),
            cache_path: Some(cache.clone()),
            ..Default::default()
        };
        let s = Settings::resolve(cli, env(&[]), FileConfig::default()).unwrap();
        let c = s.build_checker().unwrap();
        assert!(c.binary_question("Mario jumps", "q?").unwrap().is_true());
        assert_eq!(std::fs::read_to_string(cache).unwrap().lines().count(), 1);
    }
}
