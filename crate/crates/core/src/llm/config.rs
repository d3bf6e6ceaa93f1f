//! Provider configuration: TOML profiles, `WHATIF_*` environment overrides
//! and gateway construction.
//!
//! ```toml
//! default_profile = "gpt4o"
//!
//! [profiles.gpt4o]
//! kind = "openai"
//! base_url = "https://api.openai.com/v1"
//! model = "gpt-4o"
//! embedding_model = "text-embedding-3-small"
//! api_key_env = "OPENAI_API_KEY"
//! ```

use super::{Gateway, GatewayOptions, MockProvider, MockScript, Provider, TranscriptSink};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("invalid mock script: {0}")]
    Script(#[from] serde_json::Error),
    #[error("unknown provider or profile `{0}`")]
    UnknownProvider(String),
    #[error("invalid value for {key}: {value}")]
    InvalidValue { key: String, value: String },
    #[error("missing setting: {0}")]
    Missing(String),
    #[error("provider kind `{0}` is not available in this build")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    #[serde(alias = "openai-compatible")]
    OpenAi,
    Local,
}

impl FromStr for ProviderKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(Self::Mock),
            "openai" | "openai-compatible" => Ok(Self::OpenAi),
            "local" | "ollama" => Ok(Self::Local),
            _ => Err(ConfigError::UnknownProvider(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the credential; the secret
    /// itself is never stored in config.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_refinements: usize,
    pub max_attempts: usize,
    pub concurrency: usize,
    pub min_interval_ms: u64,
    pub inference_temperature: Option<f64>,
    pub extraction_temperature: Option<f64>,
    pub mock_script: Option<PathBuf>,
    pub seed: u64,
    pub transcript: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        let gw = GatewayOptions::default();
        Self {
            kind: ProviderKind::Mock,
            base_url: String::new(),
            model: String::new(),
            embedding_model: String::new(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_refinements: gw.max_refinements,
            max_attempts: gw.max_attempts,
            concurrency: gw.concurrency,
            min_interval_ms: gw.min_interval_ms,
            inference_temperature: None,
            extraction_temperature: None,
            mock_script: None,
            seed: 0,
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub default_profile: Option<String>,
    pub profiles: BTreeMap<String, ProviderConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_env<T: FromStr>(key: &str, value: String) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value })
}

impl ProviderConfig {
    pub fn for_kind(kind: ProviderKind) -> Self {
        let mut cfg = Self { kind, ..Self::default() };
        match kind {
            ProviderKind::Mock => {}
            ProviderKind::OpenAi => {
                cfg.base_url = "https://api.openai.com/v1".into();
                cfg.model = "gpt-4o".into();
                cfg.embedding_model = "text-embedding-3-small".into();
            }
            ProviderKind::Local => {
                cfg.base_url = "http://127.0.0.1:11434".into();
                cfg.model = "llama3.1".into();
                cfg.embedding_model = "llama3.1".into();
            }
        }
        cfg
    }

    /// Picks a profile by name (falling back to a bare provider kind), then
    /// applies environment overrides. `selector` comes from the command line
    /// and wins over the file's `default_profile` and `WHATIF_PROVIDER`.
    pub fn resolve(
        file: Option<&ConfigFile>,
        selector: Option<&str>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let env_selector = env("WHATIF_PROVIDER");
        let name = selector
            .map(str::to_string)
            .or(env_selector)
            .or_else(|| file.and_then(|f| f.default_profile.clone()));
        let mut cfg = match name {
            None => Self::default(),
            Some(name) => match file.and_then(|f| f.profiles.get(&name)) {
                Some(profile) => profile.clone(),
                None => Self::for_kind(name.parse()?),
            },
        };
        cfg.apply_env(env)?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = env("WHATIF_BASE_URL") {
            self.base_url = v;
        }
        if let Some(v) = env("WHATIF_MODEL") {
            self.model = v;
        }
        if let Some(v) = env("WHATIF_EMBEDDING_MODEL") {
            self.embedding_model = v;
        }
        if let Some(v) = env("WHATIF_API_KEY_ENV") {
            self.api_key_env = v;
        }
        if let Some(v) = env("WHATIF_TIMEOUT_SECS") {
            self.timeout_secs = parse_env("WHATIF_TIMEOUT_SECS", v)?;
        }
        if let Some(v) = env("WHATIF_MAX_REFINEMENTS") {
            self.max_refinements = parse_env("WHATIF_MAX_REFINEMENTS", v)?;
        }
        if let Some(v) = env("WHATIF_CONCURRENCY") {
            self.concurrency = parse_env("WHATIF_CONCURRENCY", v)?;
        }
        if let Some(v) = env("WHATIF_MOCK_SCRIPT") {
            self.mock_script = Some(v.into());
        }
        if let Some(v) = env("WHATIF_TRANSCRIPT") {
            self.transcript = Some(v.into());
        }
        Ok(())
    }

    pub fn gateway_options(&self) -> GatewayOptions {
        let mut options = GatewayOptions {
            chat_model: self.model.clone(),
            embedding_model: self.embedding_model.clone(),
            max_refinements: self.max_refinements,
            max_attempts: self.max_attempts,
            concurrency: self.concurrency,
            min_interval_ms: self.min_interval_ms,
            inference_temperature: self.inference_temperature,
            extraction_temperature: self.extraction_temperature,
            ..GatewayOptions::default()
        };
        if self.kind == ProviderKind::Mock {
            options.backoff_base_ms = 0;
            options.backoff_max_ms = 0;
            if options.chat_model.is_empty() {
                options.chat_model = "mock".into();
            }
            if options.embedding_model.is_empty() {
                options.embedding_model = "mock-embedding".into();
            }
        }
        options
    }

    pub fn mock_provider(&self) -> Result<MockProvider, ConfigError> {
        let mut script = match &self.mock_script {
            Some(path) => serde_json::from_str::<MockScript>(&std::fs::read_to_string(path)?)?,
            None => MockScript::default(),
        };
        if self.seed != 0 {
            script.seed = self.seed;
        }
        Ok(MockProvider::from_script(script))
    }

    fn provider(&self) -> Result<Arc<dyn Provider>, ConfigError> {
        match self.kind {
            ProviderKind::Mock => Ok(Arc::new(self.mock_provider()?)),
            #[cfg(feature = "http")]
            kind => {
                use super::http::{HttpProvider, WireShape};
                if self.base_url.is_empty() {
                    return Err(ConfigError::Missing("base_url".into()));
                }
                let shape = if kind == ProviderKind::Local { WireShape::Local } else { WireShape::OpenAi };
                let key = std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty());
                if shape == WireShape::OpenAi && key.is_none() {
                    log::warn!("{} is not set; sending requests without credentials", self.api_key_env);
                }
                Ok(Arc::new(HttpProvider::new(
                    shape,
                    &self.base_url,
                    key,
                    std::time::Duration::from_secs(self.timeout_secs.max(1)),
                )))
            }
            #[cfg(not(feature = "http"))]
            kind => Err(ConfigError::Unavailable(format!("{kind:?}"))),
        }
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let mut gateway = Gateway::new(self.provider()?, self.gateway_options());
        if let Some(path) = &self.transcript {
            gateway = gateway.with_transcript(TranscriptSink::to_file(path)?);
        }
        Ok(gateway)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    const FILE: &str = r#"
default_profile = "fast"

[profiles.fast]
kind = "openai"
base_url = "http://localhost:9000/v1"
model = "small"
max_refinements = 3

[profiles.offline]
kind = "mock"
seed = 9
"#;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> =
            pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn precedence_is_selector_then_env_then_file() {
        let file = ConfigFile::parse(FILE).unwrap();
        let from_file = ProviderConfig::resolve(Some(&file), None, env(&[])).unwrap();
        assert_eq!(from_file.model, "small");
        assert_eq!(from_file.max_refinements, 3);
        assert_eq!(from_file.timeout_secs, 120);

        let env_pick = ProviderConfig::resolve(Some(&file), None, env(&[("WHATIF_PROVIDER", "offline")])).unwrap();
        assert_eq!(env_pick.kind, ProviderKind::Mock);
        assert_eq!(env_pick.seed, 9);

        let flag_pick = ProviderConfig::resolve(
            Some(&file),
            Some("local"),
            env(&[("WHATIF_PROVIDER", "offline"), ("WHATIF_MODEL", "tiny")]),
        )
        .unwrap();
        assert_eq!(flag_pick.kind, ProviderKind::Local);
        assert_eq!(flag_pick.model, "tiny");
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(matches!(
            ProviderConfig::resolve(None, Some("nope"), env(&[])),
            Err(ConfigError::UnknownProvider(_))
        ));
        assert!(matches!(
            ProviderConfig::resolve(None, None, env(&[("WHATIF_MAX_REFINEMENTS", "lots")])),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(ConfigFile::parse("profiles = 3").is_err());
    }

    #[test]
    fn mock_gateway_loads_script() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("s.json");
        std::fs::write(&script, r#"{"default": "scripted"}"#).unwrap();
        let cfg = ProviderConfig { mock_script: Some(script), ..ProviderConfig::default() };
        let gw = cfg.build_gateway().unwrap();
        let mut ex = super::super::ChatExchange::new("s", "u");
        assert_eq!(gw.complete(&mut ex).unwrap(), "scripted");
        assert_eq!(ex.model_name, "mock");
    }
}
