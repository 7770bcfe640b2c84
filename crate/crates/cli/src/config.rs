use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use litmine::gateway::{
    FixtureResponder, Gateway, MockBackend, OpenAiBackend, OpenAiConfig, RetryPolicy, ScriptedResponder, TemplateSet,
};
use litmine::registry::{CtGovClient, CtGovConfig, EutilsClient, EutilsConfig, FixtureStore, PublicationRegistry, TrialRegistry};
use serde::Deserialize;

/// Top-level TOML configuration. Every section is optional; relative paths
/// resolve against the config file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub registry: RegistryConfig,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum BackendConfig {
    Openai(OpenAiConfig),
    /// Offline replies: `responses` is a scripted `(task, subject) -> reply`
    /// file, `fixtures_dir` a directory of recorded replies keyed by prompt
    /// hash. With neither, the backend echoes prompts.
    Mock {
        #[serde(default)]
        responses: Option<PathBuf>,
        #[serde(default)]
        fixtures_dir: Option<PathBuf>,
        #[serde(default)]
        strict: bool,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { responses: None, fixtures_dir: None, strict: false }
    }
}

#[derive(Debug, Deserialize)]
pub struct GatewayConfig {
    #[serde(flatten)]
    pub backend: BackendConfig,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_delay_ms")]
    pub retry_base_delay_ms: u64,
    /// Directory of `{task}.txt` prompt overrides.
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            concurrency: default_concurrency(),
            max_attempts: default_attempts(),
            retry_base_delay_ms: default_delay_ms(),
            templates_dir: None,
        }
    }
}

fn default_concurrency() -> usize {
    8
}

fn default_attempts() -> u32 {
    3
}

fn default_delay_ms() -> u64 {
    1000
}

#[derive(Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegistryConfig {
    /// No registry; commands that search or fetch fail.
    #[default]
    None,
    Fixture {
        dir: PathBuf,
    },
    Live {
        #[serde(default)]
        eutils: EutilsConfig,
        #[serde(default)]
        ctgov: CtGovConfig,
    },
}

pub struct Registries {
    pub publications: Arc<dyn PublicationRegistry>,
    pub trials: Arc<dyn TrialRegistry>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<(Self, PathBuf)> {
        let Some(path) = path else {
            return Ok((Config::default(), PathBuf::from(".")));
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok((config, base))
    }

    pub fn gateway(&self, base: &Path) -> Result<Gateway> {
        let g = &self.gateway;
        let gateway = match &g.backend {
            BackendConfig::Openai(c) => Gateway::new(Arc::new(OpenAiBackend::new(c.clone())?)),
            BackendConfig::Mock { responses, fixtures_dir, strict } => {
                let backend = match (responses, fixtures_dir) {
                    (Some(_), Some(_)) => bail!("mock backend takes `responses` or `fixtures_dir`, not both"),
                    (Some(p), None) => MockBackend::new(Arc::new(
                        ScriptedResponder::from_file(&base.join(p)).with_context(|| format!("loading {}", p.display()))?,
                    )),
                    (None, Some(d)) => MockBackend::new(Arc::new(
                        FixtureResponder::from_dir(base.join(d), *strict).with_context(|| format!("loading {}", d.display()))?,
                    )),
                    (None, None) => MockBackend::echo(),
                };
                Gateway::mock(backend)
            }
        };
        let mut gateway = gateway
            .with_concurrency(g.concurrency.max(1))
            .with_retry(RetryPolicy { max_attempts: g.max_attempts.max(1), base_delay: Duration::from_millis(g.retry_base_delay_ms), jitter: true });
        if let Some(dir) = &g.templates_dir {
            gateway = gateway.with_templates(TemplateSet::with_overrides(&base.join(dir))?);
        }
        Ok(gateway)
    }

    pub fn registries(&self, base: &Path) -> Result<Registries> {
        Ok(match &self.registry {
            RegistryConfig::None => bail!("this command needs a [registry] section in the config"),
            RegistryConfig::Fixture { dir } => {
                let store = Arc::new(FixtureStore::load(base.join(dir))?);
                Registries { publications: store.clone(), trials: store }
            }
            RegistryConfig::Live { eutils, ctgov } => Registries {
                publications: Arc::new(EutilsClient::new(eutils.clone())?),
                trials: Arc::new(CtGovClient::new(ctgov.clone())?),
            },
        })
    }
}
