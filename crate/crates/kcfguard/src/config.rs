//! CLI configuration: TOML file, environment overrides, flag overrides.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use kcfguard_core::dataset::DEFAULT_TOKEN_LIMIT;
use kcfguard_core::seed::DEFAULT_SEED;

use crate::remote::{DEFAULT_TIMEOUT_MS, ENDPOINT_ENV, TIMEOUT_ENV, TOKEN_ENV};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field} path does not exist: {path}")]
    MissingPath { field: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    MockRules,
    MockReplay,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub replay_dir: Option<PathBuf>,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_in_flight() -> usize {
    4
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::MockRules,
            endpoint: None,
            replay_dir: None,
            token: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub umi_path: Option<PathBuf>,
    #[serde(default)]
    pub rules_path: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default = "default_token_limit")]
    pub token_limit: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub f1_floor: Option<f64>,
}

fn default_token_limit() -> usize {
    DEFAULT_TOKEN_LIMIT
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("kcfguard-out")
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            umi_path: None,
            rules_path: None,
            backend: BackendSpec::default(),
            token_limit: DEFAULT_TOKEN_LIMIT,
            seed: DEFAULT_SEED,
            output_dir: default_output_dir(),
            f1_floor: None,
        }
    }
}

impl CliConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path)
    }

    /// Applies endpoint/timeout/token variables through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(ep) = get(ENDPOINT_ENV).filter(|s| !s.is_empty()) {
            self.backend.endpoint = Some(ep);
        }
        if let Some(t) = get(TIMEOUT_ENV).filter(|s| !s.is_empty()) {
            self.backend.timeout_ms = t.trim().parse().map_err(|_| {
                ConfigError::Invalid(format!("{TIMEOUT_ENV} is not an integer: {t}"))
            })?;
        }
        if let Some(tok) = get(TOKEN_ENV).filter(|s| !s.is_empty()) {
            self.backend.token = Some(tok);
        }
        Ok(())
    }

    /// Referenced input paths must exist; the backend spec must be complete.
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, p) in [
            ("umi_path", &self.umi_path),
            ("rules_path", &self.rules_path),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(ConfigError::MissingPath {
                        field,
                        path: p.clone(),
                    });
                }
            }
        }
        match self.backend.kind {
            BackendKind::Remote if self.backend.endpoint.is_none() => Err(ConfigError::Invalid(
                format!("remote backend needs an endpoint (flag, config or {ENDPOINT_ENV})"),
            )),
            BackendKind::MockReplay => match &self.backend.replay_dir {
                None => Err(ConfigError::Invalid(
                    "mock-replay backend needs a replay_dir".into(),
                )),
                Some(d) if !d.is_dir() => Err(ConfigError::MissingPath {
                    field: "replay_dir",
                    path: d.clone(),
                }),
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }?;
        if self.token_limit == 0 {
            return Err(ConfigError::Invalid("token_limit must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_toml() {
        let c = CliConfig::from_toml_str("", Path::new("c.toml")).unwrap();
        assert_eq!(c, CliConfig::default());
        assert_eq!(c.seed, DEFAULT_SEED);
        assert_eq!(c.token_limit, 512);

        let c = CliConfig::from_toml_str(
            "seed = 7\ntoken_limit = 256\n[backend]\nkind = \"remote\"\nendpoint = \"http://h:1\"\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.backend.kind, BackendKind::Remote);
        c.validate().unwrap();

        assert!(CliConfig::from_toml_str("bogus = 1", Path::new("c.toml")).is_err());
    }

    #[test]
    fn env_overrides_and_validation() {
        let mut c = CliConfig::default();
        c.backend.kind = BackendKind::Remote;
        assert!(c.validate().is_err());
        c.apply_env(|k| match k {
            ENDPOINT_ENV => Some("http://127.0.0.1:9".into()),
            TIMEOUT_ENV => Some("250".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.backend.timeout_ms, 250);
        c.validate().unwrap();
        assert!(c
            .apply_env(|k| (k == TIMEOUT_ENV).then(|| "soon".into()))
            .is_err());

        let c = CliConfig {
            umi_path: Some(PathBuf::from("/definitely/not/here.json")),
            ..CliConfig::default()
        };
        assert!(matches!(c.validate(), Err(ConfigError::MissingPath { .. })));
    }
}
