//! Scripted in-process backends.
//!
//! Each mock answers from an ordered rule list (first match wins) and counts
//! every invocation, so tests can check cost accounting against what the
//! backend actually observed. A rule's replies are served in order; the
//! last reply repeats once the list is exhausted.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, BackendId, EvidenceSnippet, LlmBackend, LlmRequest, LlmResponse, NliBackend,
    NliScores, SearchBackend, TokenProb,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<Vec<(String, f64)>>,
    /// Fail this call with a transient error carrying the message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<String>,
}

impl MockReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn distribution(entries: &[(&str, f64)]) -> Self {
        Self {
            distribution: Some(entries.iter().map(|(t, p)| (t.to_string(), *p)).collect()),
            ..Self::default()
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            fail: Some(message.into()),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRule {
    /// Every string must occur in the prompt for the rule to match.
    pub contains: Vec<String>,
    pub replies: Vec<MockReply>,
}

impl LlmRule {
    pub fn new<I, S>(contains: I, replies: Vec<MockReply>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            contains: contains.into_iter().map(Into::into).collect(),
            replies,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRule {
    #[serde(default)]
    pub premise_contains: Option<String>,
    #[serde(default)]
    pub hypothesis_contains: Option<String>,
    pub scores: NliScores,
}

impl NliRule {
    pub fn new(premise: Option<&str>, hypothesis: Option<&str>, scores: NliScores) -> Self {
        Self {
            premise_contains: premise.map(String::from),
            hypothesis_contains: hypothesis.map(String::from),
            scores,
        }
    }

    fn matches(&self, premise: &str, hypothesis: &str) -> bool {
        self.premise_contains.as_deref().is_none_or(|p| premise.contains(p))
            && self
                .hypothesis_contains
                .as_deref()
                .is_none_or(|h| hypothesis.contains(h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRule {
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub query_contains: Option<String>,
    #[serde(default)]
    pub results: Vec<EvidenceSnippet>,
    #[serde(default)]
    pub quota_exceeded: bool,
}

impl SearchRule {
    pub fn exact(query: &str, results: Vec<EvidenceSnippet>) -> Self {
        Self {
            query: Some(query.to_string()),
            query_contains: None,
            results,
            quota_exceeded: false,
        }
    }

    pub fn containing(fragment: &str, results: Vec<EvidenceSnippet>) -> Self {
        Self {
            query: None,
            query_contains: Some(fragment.to_string()),
            results,
            quota_exceeded: false,
        }
    }

    fn matches(&self, query: &str) -> bool {
        self.query.as_deref().is_none_or(|q| q == query)
            && self.query_contains.as_deref().is_none_or(|q| query.contains(q))
    }
}

fn default_nli_scores() -> NliScores {
    NliScores {
        entailment: 0.1,
        neutral: 0.8,
        contradiction: 0.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliFixture {
    #[serde(default)]
    pub rules: Vec<NliRule>,
    #[serde(default = "default_nli_scores")]
    pub default: NliScores,
}

impl Default for NliFixture {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: default_nli_scores(),
        }
    }
}

/// JSON file describing all three mocks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default)]
    pub llm: Vec<LlmRule>,
    #[serde(default)]
    pub nli: NliFixture,
    #[serde(default)]
    pub search: Vec<SearchRule>,
}

impl MockFixture {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::unavailable(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::unavailable(format!("{}: {e}", path.display())))
    }

    pub fn into_backends(self) -> (MockLlm, MockNli, MockSearch) {
        (
            MockLlm::new(self.llm),
            MockNli::new(self.nli.rules, self.nli.default),
            MockSearch::new(self.search),
        )
    }
}

#[derive(Debug, Default)]
pub struct MockLlm {
    rules: Vec<LlmRule>,
    cursors: Vec<AtomicUsize>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl MockLlm {
    pub fn new(rules: Vec<LlmRule>) -> Self {
        let cursors = rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Self {
            rules,
            cursors,
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

#[async_trait]
impl LlmBackend for MockLlm {
    fn id(&self) -> BackendId {
        BackendId::new("mock", "scripted-llm")
    }

    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(request.prompt.clone());

        let (index, rule) = self
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains.iter().all(|c| request.prompt.contains(c.as_str())))
            .ok_or_else(|| BackendError::unavailable("mock llm: no rule matches the prompt"))?;
        if rule.replies.is_empty() {
            return Err(BackendError::unavailable("mock llm: rule has no replies"));
        }
        let turn = self.cursors[index].fetch_add(1, Ordering::SeqCst);
        let reply = &rule.replies[turn.min(rule.replies.len() - 1)];

        if let Some(message) = &reply.fail {
            return Err(BackendError::transient(message.clone()));
        }
        if request.want_logprobs && reply.distribution.is_none() {
            return Err(BackendError::LogprobsUnsupported);
        }
        let first_token_probs = if request.want_logprobs {
            reply.distribution.as_ref().map(|d| {
                d.iter()
                    .take(request.top_k_logprobs as usize)
                    .map(|(token, prob)| TokenProb {
                        token: token.clone(),
                        prob: *prob,
                    })
                    .collect()
            })
        } else {
            None
        };
        let text = match (&reply.text, &reply.distribution) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => d.first().map(|(t, _)| t.clone()).unwrap_or_default(),
            (None, None) => String::new(),
        };
        Ok(LlmResponse {
            text,
            first_token_probs,
        })
    }
}

#[derive(Debug)]
pub struct MockNli {
    rules: Vec<NliRule>,
    default: NliScores,
    max_input_tokens: usize,
    calls: Mutex<Vec<(String, String)>>,
}

impl Default for MockNli {
    fn default() -> Self {
        Self::new(Vec::new(), default_nli_scores())
    }
}

impl MockNli {
    pub fn new(rules: Vec<NliRule>, default: NliScores) -> Self {
        Self {
            rules,
            default,
            max_input_tokens: 512,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn with_max_input_tokens(mut self, budget: usize) -> Self {
        self.max_input_tokens = budget;
        self
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("nli log poisoned").len()
    }

    pub fn calls(&self) -> Vec<(String, String)> {
        self.calls.lock().expect("nli log poisoned").clone()
    }
}

#[async_trait]
impl NliBackend for MockNli {
    fn id(&self) -> BackendId {
        BackendId::new("mock", "scripted-nli")
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        self.calls
            .lock()
            .expect("nli log poisoned")
            .push((premise.to_string(), hypothesis.to_string()));
        Ok(self
            .rules
            .iter()
            .find(|r| r.matches(premise, hypothesis))
            .map(|r| r.scores)
            .unwrap_or(self.default))
    }
}

#[derive(Debug, Default)]
pub struct MockSearch {
    rules: Vec<SearchRule>,
    queries: Mutex<Vec<String>>,
}

impl MockSearch {
    pub fn new(rules: Vec<SearchRule>) -> Self {
        Self {
            rules,
            queries: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.queries.lock().expect("search log poisoned").len()
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().expect("search log poisoned").clone()
    }
}

#[async_trait]
impl SearchBackend for MockSearch {
    fn id(&self) -> BackendId {
        BackendId::new("mock", "scripted-search")
    }

    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
        self.queries
            .lock()
            .expect("search log poisoned")
            .push(query.to_string());
        match self.rules.iter().find(|r| r.matches(query)) {
            Some(rule) if rule.quota_exceeded => Err(BackendError::QuotaExceeded),
            Some(rule) => {
                let mut hits = rule.results.clone();
                hits.sort_by_key(|h| h.rank);
                hits.truncate(k);
                Ok(hits)
            }
            None => Ok(Vec::new()),
        }
    }
}
