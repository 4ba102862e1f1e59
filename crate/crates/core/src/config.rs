//! Run configuration (TOML) and backend assembly.
//!
//! ```toml
//! mode = "record"
//! cache_dir = "cache"
//! k_rationales = 3
//! alpha = 0.5
//! beta = 0.5
//!
//! [llm]
//! kind = "chat-completions"
//! endpoint = "https://api.example.com/v1"
//! model = "some-model"
//! api_key_env = "LLM_API_KEY"
//!
//! [nli]
//! kind = "mock"
//! fixture = "fixtures/mock.json"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::http::{api_key_from_env, ChatCompletionsClient, HttpNliClient, SearchApiClient};
use crate::backends::{
    BackendError, BackendSettings, Backends, CachedLlm, CachedNli, CachedSearch,
    ExecutionMode, LlmBackend, MockFixture, NliBackend, ResponseCache, Resilient, RetryPolicy,
    SearchBackend,
};
use crate::prompts::TemplateSet;
use crate::router::RoutingThresholds;
use crate::signals::{DegeneratePolicy, VerdictLexicon};
use crate::strategies::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Mock,
    ChatCompletions,
    Http,
    SearchApi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_input_tokens")]
    pub max_input_tokens: usize,
}

fn default_timeout() -> u64 {
    60
}
fn default_max_input_tokens() -> usize {
    512
}

impl BackendConfig {
    pub fn mock(fixture: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: None,
            fixture: Some(fixture.into()),
            timeout_secs: default_timeout(),
            max_input_tokens: default_max_input_tokens(),
        }
    }

    fn required<'a>(&'a self, field: &'static str, v: &'a Option<String>) -> Result<&'a str, ConfigError> {
        v.as_deref().ok_or_else(|| invalid(field, format!("required for kind {:?}", self.kind)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconConfig {
    pub true_tokens: Vec<String>,
    pub false_tokens: Vec<String>,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            true_tokens: vec!["true".into(), "yes".into()],
            false_tokens: vec!["false".into(), "no".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: ExecutionMode,
    pub seed: u64,
    pub cache_dir: Option<PathBuf>,
    pub parallelism: usize,
    pub max_in_flight: usize,
    pub k_rationales: usize,
    pub alpha: f64,
    pub beta: f64,
    pub bins: usize,
    pub deep_budget: usize,
    pub search_k: usize,
    pub grid_step: f64,
    pub margin_scale: f64,
    pub degenerate_policy: DegeneratePolicy,
    pub factual_label: String,
    pub non_factual_label: String,
    pub templates_dir: Option<PathBuf>,
    pub top_k_logprobs: u32,
    pub rationale_temperature: f64,
    pub lexicon: LexiconConfig,
    pub retry: RetryPolicy,
    pub llm: Option<BackendConfig>,
    pub nli: Option<BackendConfig>,
    pub search: Option<BackendConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let settings = BackendSettings::default();
        Self {
            mode: ExecutionMode::Live,
            seed: 0,
            cache_dir: None,
            parallelism: 4,
            max_in_flight: 4,
            k_rationales: 3,
            alpha: 0.5,
            beta: 0.5,
            bins: 10,
            deep_budget: 3,
            search_k: 5,
            grid_step: 0.05,
            margin_scale: 1.0,
            degenerate_policy: DegeneratePolicy::Zero,
            factual_label: "True".into(),
            non_factual_label: "False".into(),
            templates_dir: None,
            top_k_logprobs: settings.top_k_logprobs,
            rationale_temperature: settings.rationale_temperature,
            lexicon: LexiconConfig::default(),
            retry: RetryPolicy::default(),
            llm: None,
            nli: None,
            search: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        for section in [&mut config.llm, &mut config.nli, &mut config.search]
            .into_iter()
            .flatten()
        {
            if let Some(f) = &section.fixture {
                if f.is_relative() {
                    section.fixture = Some(base.join(f));
                }
            }
        }
        for dir in [&mut config.cache_dir, &mut config.templates_dir].into_iter().flatten() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(config)
    }

    pub fn thresholds(&self) -> Result<RoutingThresholds, ConfigError> {
        RoutingThresholds::new(self.alpha, self.beta).map_err(|e| invalid("alpha/beta", e.to_string()))
    }

    pub fn lexicon(&self) -> Result<VerdictLexicon, ConfigError> {
        VerdictLexicon::new(&self.lexicon.true_tokens, &self.lexicon.false_tokens)
            .map_err(|e| invalid("lexicon", e.to_string()))
    }

    /// Range checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.thresholds()?;
        self.lexicon()?;
        let positive = [
            ("k_rationales", self.k_rationales),
            ("bins", self.bins),
            ("deep_budget", self.deep_budget),
            ("search_k", self.search_k),
            ("parallelism", self.parallelism),
            ("max_in_flight", self.max_in_flight),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if !(self.margin_scale.is_finite() && self.margin_scale > 0.0) {
            return Err(invalid("margin_scale", "must be positive"));
        }
        if !(self.grid_step > 0.0 && self.grid_step < 1.0) {
            return Err(invalid("grid_step", "must lie in (0, 1)"));
        }
        if self.retry.attempts == 0 {
            return Err(invalid("retry.attempts", "must be at least 1"));
        }
        if self.factual_label.trim().is_empty() || self.non_factual_label.trim().is_empty() {
            return Err(invalid("factual_label", "labels must be non-empty"));
        }
        if self.factual_label.eq_ignore_ascii_case(&self.non_factual_label) {
            return Err(invalid("factual_label", "labels must differ"));
        }
        match (&self.mode, &self.cache_dir) {
            (ExecutionMode::Replay, None) => return Err(invalid("cache_dir", "replay mode needs a cache directory")),
            (ExecutionMode::Replay, Some(dir)) if !dir.is_dir() => {
                return Err(invalid("cache_dir", format!("{} does not exist", dir.display())))
            }
            (ExecutionMode::Record, None) => return Err(invalid("cache_dir", "record mode needs a cache directory")),
            _ => {}
        }
        Ok(())
    }

    pub fn pipeline(&self, verbal: bool) -> Result<PipelineConfig, ConfigError> {
        Ok(PipelineConfig {
            k_rationales: self.k_rationales,
            thresholds: self.thresholds()?,
            deep_budget: self.deep_budget,
            search_k: self.search_k,
            lexicon: self.lexicon()?,
            degenerate_policy: self.degenerate_policy,
            margin_scale: self.margin_scale,
            verbal,
        })
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        let set = match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| invalid("templates_dir", e.to_string()))?,
            None => TemplateSet::default(),
        };
        Ok(set.with_labels(&self.factual_label, &self.non_factual_label))
    }

    fn section<'a>(&self, field: &'static str, s: &'a Option<BackendConfig>) -> Result<&'a BackendConfig, ConfigError> {
        s.as_ref().ok_or_else(|| invalid(field, "backend section missing"))
    }

    fn api_key(&self, section: &BackendConfig) -> Result<Option<String>, ConfigError> {
        if self.mode == ExecutionMode::Replay {
            return Ok(None);
        }
        Ok(api_key_from_env(section.api_key_env.as_deref())?)
    }

    fn mock_fixture(section: &BackendConfig, field: &'static str) -> Result<MockFixture, ConfigError> {
        let path = section
            .fixture
            .as_ref()
            .ok_or_else(|| invalid(field, "mock backends need a fixture path"))?;
        Ok(MockFixture::load(path)?)
    }

    /// Build the backend stack: cache over retry/concurrency over the client.
    pub fn backends(&self) -> Result<Backends, ConfigError> {
        let llm_cfg = self.section("llm", &self.llm)?;
        let nli_cfg = self.section("nli", &self.nli)?;
        let search_cfg = self.section("search", &self.search)?;

        let llm: Arc<dyn LlmBackend> = match llm_cfg.kind {
            BackendKind::Mock => Arc::new(Self::mock_fixture(llm_cfg, "llm")?.into_backends().0),
            BackendKind::ChatCompletions => Arc::new(ChatCompletionsClient::new(
                llm_cfg.required("llm.endpoint", &llm_cfg.endpoint)?,
                llm_cfg.required("llm.model", &llm_cfg.model)?,
                self.api_key(llm_cfg)?,
                Duration::from_secs(llm_cfg.timeout_secs),
            )?),
            other => return Err(invalid("llm.kind", format!("{other:?} is not an LLM backend"))),
        };
        let nli: Arc<dyn NliBackend> = match nli_cfg.kind {
            BackendKind::Mock => Arc::new(
                Self::mock_fixture(nli_cfg, "nli")?
                    .into_backends()
                    .1
                    .with_max_input_tokens(nli_cfg.max_input_tokens),
            ),
            BackendKind::Http => Arc::new(HttpNliClient::new(
                nli_cfg.required("nli.endpoint", &nli_cfg.endpoint)?,
                nli_cfg.model.clone().unwrap_or_else(|| "nli".into()),
                self.api_key(nli_cfg)?,
                nli_cfg.max_input_tokens,
                Duration::from_secs(nli_cfg.timeout_secs),
            )?),
            other => return Err(invalid("nli.kind", format!("{other:?} is not an NLI backend"))),
        };
        let search: Arc<dyn SearchBackend> = match search_cfg.kind {
            BackendKind::Mock => Arc::new(Self::mock_fixture(search_cfg, "search")?.into_backends().2),
            BackendKind::SearchApi => Arc::new(SearchApiClient::new(
                search_cfg.required("search.endpoint", &search_cfg.endpoint)?,
                self.api_key(search_cfg)?,
                Duration::from_secs(search_cfg.timeout_secs),
            )?),
            other => return Err(invalid("search.kind", format!("{other:?} is not a search backend"))),
        };

        let (in_flight, retry) = (self.max_in_flight, self.retry);
        let llm: Arc<dyn LlmBackend> = Arc::new(Resilient::new(llm, in_flight, retry));
        let nli: Arc<dyn NliBackend> = Arc::new(Resilient::new(nli, in_flight, retry));
        let search: Arc<dyn SearchBackend> = Arc::new(Resilient::new(search, in_flight, retry));

        let (llm, nli, search): (Arc<dyn LlmBackend>, Arc<dyn NliBackend>, Arc<dyn SearchBackend>) =
            match &self.cache_dir {
                Some(dir) => {
                    let cache = ResponseCache::open(dir)?;
                    (
                        Arc::new(CachedLlm::new(llm, cache.clone(), self.mode)),
                        Arc::new(CachedNli::new(nli, cache.clone(), self.mode)),
                        Arc::new(CachedSearch::new(search, cache, self.mode)),
                    )
                }
                None => (llm, nli, search),
            };

        let settings = BackendSettings {
            top_k_logprobs: self.top_k_logprobs,
            rationale_temperature: self.rationale_temperature,
            ..BackendSettings::default()
        };
        Ok(Backends::new(llm, nli, search, Arc::new(self.templates()?), settings))
    }
}
