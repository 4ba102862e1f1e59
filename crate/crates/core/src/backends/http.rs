//! HTTP implementations of the backend traits.
//!
//! - [`ChatCompletionsClient`]: `POST {endpoint}/chat/completions` with the
//!   `logprobs` / `top_logprobs` options.
//! - [`HttpNliClient`]: `POST {endpoint}` with `{"premise", "hypothesis"}`,
//!   answering either `{"entailment", "neutral", "contradiction"}` or a list
//!   of `{"label", "score"}` objects.
//! - [`SearchApiClient`]: `POST {endpoint}` with `{"q", "num"}`, answering
//!   `{"organic": [{"title", "link", "snippet", "position"}]}`.
//!
//! API keys come from environment variables named in the configuration.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::{Client, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use super::{
    BackendError, BackendId, EvidenceSnippet, LlmBackend, LlmRequest, LlmResponse, NliBackend,
    NliScores, SearchBackend, TokenProb,
};

fn build_client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::unavailable(format!("building HTTP client: {e}")))
}

/// Read an API key from the named environment variable.
pub fn api_key_from_env(var: Option<&str>) -> Result<Option<String>, BackendError> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| BackendError::unavailable(format!("environment variable {name} is not set"))),
    }
}

async fn send_json<T: DeserializeOwned>(request: RequestBuilder) -> Result<T, BackendError> {
    let response = request.send().await.map_err(|e| {
        if e.is_timeout() || e.is_connect() || e.is_request() {
            BackendError::transient(e.to_string())
        } else {
            BackendError::unavailable(e.to_string())
        }
    })?;
    let status = response.status();
    if status == StatusCode::TOO_MANY_REQUESTS {
        return Err(BackendError::QuotaExceeded);
    }
    if status.is_server_error() {
        return Err(BackendError::transient(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let body = response.text().await.unwrap_or_default();
        return Err(BackendError::unavailable(format!("HTTP {status}: {body}")));
    }
    response
        .json::<T>()
        .await
        .map_err(|e| BackendError::InvalidResponse(e.to_string()))
}

pub struct ChatCompletionsClient {
    http: Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl ChatCompletionsClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            http: build_client(timeout)?,
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<PositionLogprobs>>,
}

#[derive(Deserialize)]
struct PositionLogprobs {
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[async_trait]
impl LlmBackend for ChatCompletionsClient {
    fn id(&self) -> BackendId {
        BackendId::new("chat-completions", &self.model)
    }

    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        request.validate()?;
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "n": request.sample_count,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(request.top_k_logprobs);
        }
        let mut call = self
            .http
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let parsed: ChatResponse = send_json(call).await?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::InvalidResponse("no choices returned".into()))?;
        let first_token_probs = if request.want_logprobs {
            let position = choice
                .logprobs
                .and_then(|l| l.content)
                .and_then(|c| c.into_iter().next())
                .ok_or(BackendError::LogprobsUnsupported)?;
            if position.top_logprobs.is_empty() {
                return Err(BackendError::LogprobsUnsupported);
            }
            Some(
                position
                    .top_logprobs
                    .into_iter()
                    .map(|t| TokenProb {
                        token: t.token,
                        prob: t.logprob.exp().min(1.0),
                    })
                    .collect(),
            )
        } else {
            None
        };
        Ok(LlmResponse {
            text: choice.message.content.unwrap_or_default(),
            first_token_probs,
        })
    }
}

pub struct HttpNliClient {
    http: Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_input_tokens: usize,
}

impl HttpNliClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        max_input_tokens: usize,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            http: build_client(timeout)?,
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            max_input_tokens,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum NliWire {
    Object(NliScores),
    Labels(Vec<LabelScore>),
    Nested(Vec<Vec<LabelScore>>),
}

#[derive(Deserialize)]
struct LabelScore {
    label: String,
    score: f64,
}

fn scores_from_labels(labels: Vec<LabelScore>) -> Result<NliScores, BackendError> {
    let mut scores = [None; 3];
    for l in labels {
        let slot = match l.label.to_lowercase().as_str() {
            "entailment" => 0,
            "neutral" => 1,
            "contradiction" => 2,
            other => {
                return Err(BackendError::InvalidResponse(format!("unknown NLI label {other:?}")))
            }
        };
        scores[slot] = Some(l.score);
    }
    match scores {
        [Some(entailment), Some(neutral), Some(contradiction)] => Ok(NliScores {
            entailment,
            neutral,
            contradiction,
        }),
        _ => Err(BackendError::InvalidResponse("NLI response lacks a class score".into())),
    }
}

#[async_trait]
impl NliBackend for HttpNliClient {
    fn id(&self) -> BackendId {
        BackendId::new("http-nli", &self.model)
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        let mut call = self.http.post(&self.endpoint).json(&json!({
            "model": self.model,
            "premise": premise,
            "hypothesis": hypothesis,
        }));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        match send_json::<NliWire>(call).await? {
            NliWire::Object(scores) => Ok(scores),
            NliWire::Labels(labels) => scores_from_labels(labels),
            NliWire::Nested(mut nested) if nested.len() == 1 => {
                scores_from_labels(nested.pop().expect("length checked"))
            }
            NliWire::Nested(_) => Err(BackendError::InvalidResponse(
                "expected a single NLI prediction".into(),
            )),
        }
    }
}

pub struct SearchApiClient {
    http: Client,
    endpoint: String,
    api_key: Option<String>,
}

impl SearchApiClient {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            http: build_client(timeout)?,
            endpoint: endpoint.into(),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct SearchWire {
    #[serde(default)]
    organic: Vec<OrganicHit>,
}

#[derive(Deserialize)]
struct OrganicHit {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    position: Option<usize>,
}

#[async_trait]
impl SearchBackend for SearchApiClient {
    fn id(&self) -> BackendId {
        BackendId::new("search-api", &self.endpoint)
    }

    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
        let mut call = self
            .http
            .post(&self.endpoint)
            .json(&json!({ "q": query, "num": k }));
        if let Some(key) = &self.api_key {
            call = call.header("X-API-KEY", key);
        }
        let wire: SearchWire = send_json(call).await?;
        let mut hits: Vec<EvidenceSnippet> = wire
            .organic
            .into_iter()
            .enumerate()
            .map(|(i, h)| EvidenceSnippet {
                title: h.title,
                url: h.link,
                snippet: h.snippet,
                rank: h.position.unwrap_or(i + 1),
            })
            .collect();
        hits.sort_by_key(|h| h.rank);
        hits.dedup_by_key(|h| h.rank);
        hits.truncate(k);
        Ok(hits)
    }
}
