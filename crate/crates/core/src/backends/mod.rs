//! Client interfaces for the three external capabilities: a logprob-capable
//! LLM, an NLI classifier and a web search engine.
//!
//! The raw traits ([`LlmBackend`], [`NliBackend`], [`SearchBackend`]) are
//! thin transport abstractions. [`Backends`] bundles one of each with the
//! template set and implements the higher-level operations the pipeline
//! needs (verdict distribution, rationale sampling, NLI judgments, search),
//! charging every call to a per-claim [`CallLedger`].

pub mod cache;
pub mod http;
pub mod mock;
pub mod resilient;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{PromptError, TemplateId, TemplateSet};
use crate::signals::{SignalError, TokenDistribution};

pub use cache::{CacheKey, CachedLlm, CachedNli, CachedSearch, ExecutionMode, ResponseCache};
pub use mock::{MockFixture, MockLlm, MockNli, MockSearch};
pub use resilient::{Resilient, RetryPolicy};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {message}")]
    Unavailable { message: String, transient: bool },
    #[error("backend cannot return token log-probabilities")]
    LogprobsUnsupported,
    #[error("search quota exceeded")]
    QuotaExceeded,
    #[error("replay cache has no entry for key {0}")]
    ReplayMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("response cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Prompt(#[from] PromptErrorString),
}

/// Cloneable wrapper so prompt failures can travel inside [`BackendError`].
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct PromptErrorString(pub String);

impl From<PromptError> for BackendError {
    fn from(e: PromptError) -> Self {
        BackendError::Prompt(PromptErrorString(e.to_string()))
    }
}

impl BackendError {
    pub fn unavailable(message: impl Into<String>) -> Self {
        BackendError::Unavailable {
            message: message.into(),
            transient: false,
        }
    }

    pub fn transient(message: impl Into<String>) -> Self {
        BackendError::Unavailable {
            message: message.into(),
            transient: true,
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Unavailable { transient: true, .. })
    }
}

/// Which service and model produced a response. Part of every cache key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackendId {
    pub backend: String,
    pub model: String,
}

impl BackendId {
    pub fn new(backend: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            backend: backend.into(),
            model: model.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub top_k_logprobs: u32,
    pub sample_count: u32,
    /// Ordinal of this sample or attempt; distinguishes otherwise identical
    /// requests in the cache.
    pub sample_index: u32,
}

impl LlmRequest {
    pub fn text(prompt: impl Into<String>, max_tokens: u32, temperature: f64) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature,
            want_logprobs: false,
            top_k_logprobs: 0,
            sample_count: 1,
            sample_index: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.want_logprobs && self.top_k_logprobs < 2 {
            return Err(BackendError::InvalidRequest(
                "top_k_logprobs must be at least 2 when logprobs are requested".into(),
            ));
        }
        if self.sample_count == 0 {
            return Err(BackendError::InvalidRequest("sample_count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    /// Top-k alternatives at the first generated position, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_probs: Option<Vec<TokenProb>>,
}

/// Class scores as reported by an NLI service, before validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliScores {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

/// Three-way NLI probability simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NliJudgment {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

impl NliJudgment {
    /// Accept scores summing to 1; rescale sums within `[0.5, 2]`; reject
    /// anything else. The flag reports whether rescaling happened.
    pub fn from_scores(scores: NliScores) -> Result<(Self, bool), BackendError> {
        let parts = [scores.entailment, scores.neutral, scores.contradiction];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(BackendError::unavailable(format!(
                "NLI scores are not non-negative numbers: {scores:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() <= SIMPLEX_TOLERANCE {
            return Ok((
                Self {
                    entailment: scores.entailment,
                    neutral: scores.neutral,
                    contradiction: scores.contradiction,
                },
                false,
            ));
        }
        if !(0.5..=2.0).contains(&sum) {
            return Err(BackendError::unavailable(format!(
                "NLI scores sum to {sum}, outside the accepted range"
            )));
        }
        tracing::warn!(sum, "renormalizing NLI scores onto the simplex");
        Ok((
            Self {
                entailment: scores.entailment / sum,
                neutral: scores.neutral / sum,
                contradiction: scores.contradiction / sum,
            },
            true,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSnippet {
    pub title: String,
    pub url: String,
    pub snippet: String,
    pub rank: usize,
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    fn id(&self) -> BackendId;
    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError>;
}

#[async_trait]
pub trait NliBackend: Send + Sync {
    fn id(&self) -> BackendId;
    /// Input budget of the underlying encoder, in whitespace tokens, shared
    /// by premise and hypothesis.
    fn max_input_tokens(&self) -> usize {
        512
    }
    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError>;
}

#[async_trait]
pub trait SearchBackend: Send + Sync {
    fn id(&self) -> BackendId;
    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError>;
}

#[async_trait]
impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn id(&self) -> BackendId {
        (**self).id()
    }

    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        (**self).complete(request).await
    }
}

#[async_trait]
impl<T: NliBackend + ?Sized> NliBackend for Arc<T> {
    fn id(&self) -> BackendId {
        (**self).id()
    }

    fn max_input_tokens(&self) -> usize {
        (**self).max_input_tokens()
    }

    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        (**self).classify(premise, hypothesis).await
    }
}

#[async_trait]
impl<T: SearchBackend + ?Sized> SearchBackend for Arc<T> {
    fn id(&self) -> BackendId {
        (**self).id()
    }

    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
        (**self).search(query, k).await
    }
}

/// Which assumption a rationale is written under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Supporting,
    Refuting,
}

/// Per-claim call counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub llm_calls: usize,
    pub nli_calls: usize,
    pub search_calls: usize,
}

/// Run-wide counters reported in the run manifest.
#[derive(Debug, Default)]
pub struct RunStats {
    pub nli_truncations: AtomicUsize,
    pub nli_renormalized: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatsSnapshot {
    pub nli_truncations: usize,
    pub nli_renormalized: usize,
}

impl RunStats {
    pub fn snapshot(&self) -> RunStatsSnapshot {
        RunStatsSnapshot {
            nli_truncations: self.nli_truncations.load(Ordering::Relaxed),
            nli_renormalized: self.nli_renormalized.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendSettings {
    pub top_k_logprobs: u32,
    pub rationale_temperature: f64,
    pub rationale_max_tokens: u32,
    pub text_max_tokens: u32,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            top_k_logprobs: 10,
            rationale_temperature: 0.7,
            rationale_max_tokens: 256,
            text_max_tokens: 512,
        }
    }
}

/// Keep at most `budget` whitespace-separated tokens.
pub fn truncate_tokens(text: &str, budget: usize) -> (String, bool) {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() <= budget {
        (text.to_string(), false)
    } else {
        (tokens[..budget].join(" "), true)
    }
}

#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn LlmBackend>,
    pub nli: Arc<dyn NliBackend>,
    pub search: Arc<dyn SearchBackend>,
    pub templates: Arc<TemplateSet>,
    pub settings: BackendSettings,
    pub stats: Arc<RunStats>,
}

impl Backends {
    pub fn new(
        llm: Arc<dyn LlmBackend>,
        nli: Arc<dyn NliBackend>,
        search: Arc<dyn SearchBackend>,
        templates: Arc<TemplateSet>,
        settings: BackendSettings,
    ) -> Self {
        Self {
            llm,
            nli,
            search,
            templates,
            settings,
            stats: Arc::new(RunStats::default()),
        }
    }

    /// Next-token distribution at the verdict position of the verdict prompt.
    pub async fn verdict_distribution(
        &self,
        ledger: &mut CallLedger,
        claim: &str,
    ) -> Result<TokenDistribution, BackendError> {
        if claim.trim().is_empty() {
            return Err(BackendError::InvalidRequest("claim is empty".into()));
        }
        let prompt = self
            .templates
            .render(TemplateId::VerdictToken, &[("statement", claim)])?;
        let request = LlmRequest {
            prompt,
            max_tokens: 1,
            temperature: 0.0,
            want_logprobs: true,
            top_k_logprobs: self.settings.top_k_logprobs,
            sample_count: 1,
            sample_index: 0,
        };
        request.validate()?;
        ledger.llm_calls += 1;
        let response = self.llm.complete(&request).await?;
        let probs = response
            .first_token_probs
            .ok_or(BackendError::LogprobsUnsupported)?;
        TokenDistribution::new(probs.into_iter().map(|t| (t.token, t.prob)).collect())
            .map_err(|e: SignalError| BackendError::InvalidResponse(e.to_string()))
    }

    /// `k` rationales written under one assumption, one request per sample.
    pub async fn rationales(
        &self,
        ledger: &mut CallLedger,
        claim: &str,
        side: Side,
        k: usize,
    ) -> Result<Vec<String>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        let template = match side {
            Side::Supporting => TemplateId::RationaleTrue,
            Side::Refuting => TemplateId::RationaleFalse,
        };
        let prompt = self.templates.render(template, &[("claim", claim)])?;
        let mut out = Vec::with_capacity(k);
        for index in 0..k {
            let request = LlmRequest {
                sample_index: index as u32,
                ..LlmRequest::text(
                    prompt.clone(),
                    self.settings.rationale_max_tokens,
                    self.settings.rationale_temperature,
                )
            };
            ledger.llm_calls += 1;
            let text = self.llm.complete(&request).await?.text.trim().to_string();
            if text.is_empty() {
                return Err(BackendError::InvalidResponse(format!(
                    "empty rationale (sample {index})"
                )));
            }
            out.push(text);
        }
        Ok(out)
    }

    pub async fn nli_classify(
        &self,
        ledger: &mut CallLedger,
        premise: &str,
        hypothesis: &str,
    ) -> Result<NliJudgment, BackendError> {
        if premise.trim().is_empty() || hypothesis.trim().is_empty() {
            return Err(BackendError::InvalidRequest("NLI inputs must be non-empty".into()));
        }
        let per_side = (self.nli.max_input_tokens() / 2).max(1);
        let (premise, cut_p) = truncate_tokens(premise, per_side);
        let (hypothesis, cut_h) = truncate_tokens(hypothesis, per_side);
        if cut_p || cut_h {
            self.stats.nli_truncations.fetch_add(1, Ordering::Relaxed);
        }
        ledger.nli_calls += 1;
        let scores = self.nli.classify(&premise, &hypothesis).await?;
        let (judgment, renormalized) = NliJudgment::from_scores(scores)?;
        if renormalized {
            self.stats.nli_renormalized.fetch_add(1, Ordering::Relaxed);
        }
        Ok(judgment)
    }

    /// Up to `k` snippets in rank order.
    pub async fn web_search(
        &self,
        ledger: &mut CallLedger,
        query: &str,
        k: usize,
    ) -> Result<Vec<EvidenceSnippet>, BackendError> {
        if query.trim().is_empty() {
            return Err(BackendError::InvalidRequest("search query is empty".into()));
        }
        if k == 0 {
            return Err(BackendError::InvalidRequest("k must be at least 1".into()));
        }
        ledger.search_calls += 1;
        let mut hits = self.search.search(query, k).await?;
        hits.sort_by_key(|h| h.rank);
        if hits.windows(2).any(|w| w[0].rank == w[1].rank) {
            return Err(BackendError::InvalidResponse(
                "search results carry duplicate ranks".into(),
            ));
        }
        hits.truncate(k);
        Ok(hits)
    }

    /// Deterministic free-text completion; `attempt` separates reprompts.
    pub async fn generate(
        &self,
        ledger: &mut CallLedger,
        prompt: &str,
        attempt: u32,
    ) -> Result<String, BackendError> {
        let request = LlmRequest {
            sample_index: attempt,
            ..LlmRequest::text(prompt, self.settings.text_max_tokens, 0.0)
        };
        ledger.llm_calls += 1;
        Ok(self.llm.complete(&request).await?.text)
    }

    pub fn ids(&self) -> [BackendId; 3] {
        [self.llm.id(), self.nli.id(), self.search.id()]
    }
}
