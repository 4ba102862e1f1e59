//! Content-addressed response cache and the live/record/replay modes.
//!
//! One JSON file per request, named by the SHA-256 of a canonical
//! serialization of `(backend, model, operation, request)`. Entries are
//! published by write-to-temp then rename-without-clobber, so the first
//! writer of a key wins and a published file never changes.

use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    BackendError, BackendId, EvidenceSnippet, LlmBackend, LlmRequest, LlmResponse, NliBackend,
    NliScores, SearchBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Read-through cache; network on miss; cache writes are best effort.
    #[default]
    Live,
    /// As live, but a failed cache write is an error.
    Record,
    /// Cache only; a miss is an error.
    Replay,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::Live => "live",
            ExecutionMode::Record => "record",
            ExecutionMode::Replay => "replay",
        })
    }
}

impl FromStr for ExecutionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ExecutionMode::Live),
            "record" => Ok(ExecutionMode::Record),
            "replay" => Ok(ExecutionMode::Replay),
            other => Err(format!("unknown mode {other:?} (expected live, record or replay)")),
        }
    }
}

/// 64-hex-char SHA-256 digest identifying one logical request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn compute<R: Serialize>(id: &BackendId, op: &str, request: &R) -> Result<Self, BackendError> {
        let material = canonical_json(id, op, request)?;
        Ok(Self(hex::encode(Sha256::digest(material.as_bytes()))))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json<R: Serialize>(
    id: &BackendId,
    op: &str,
    request: &R,
) -> Result<String, BackendError> {
    // serde_json::Value's map is ordered by key, so re-serializing through
    // Value sorts every object.
    let request = serde_json::to_value(request).map_err(|e| BackendError::Cache(e.to_string()))?;
    let value = json!({
        "backend": id.backend,
        "model": id.model,
        "op": op,
        "request": request,
    });
    serde_json::to_string(&value).map_err(|e| BackendError::Cache(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub backend: String,
    pub model: String,
    pub op: String,
    pub request: Value,
    pub response: Value,
    pub recorded_at: u64,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &CacheKey) -> Result<Option<T>, BackendError> {
        let path = self.path_for(key);
        let text = match std::fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Cache(format!("{}: {e}", path.display()))),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
        serde_json::from_value(entry.response)
            .map(Some)
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))
    }

    /// Publish an entry unless one already exists. Returns whether this
    /// call wrote the file.
    pub fn put<R: Serialize, T: Serialize>(
        &self,
        id: &BackendId,
        op: &str,
        request: &R,
        response: &T,
    ) -> Result<bool, BackendError> {
        let key = CacheKey::compute(id, op, request)?;
        let path = self.path_for(&key);
        if path.exists() {
            return Ok(false);
        }
        let entry = CacheEntry {
            key,
            backend: id.backend.clone(),
            model: id.model.clone(),
            op: op.to_string(),
            request: to_value(request)?,
            response: to_value(response)?,
            recorded_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let body = serde_json::to_vec_pretty(&entry).map_err(|e| BackendError::Cache(e.to_string()))?;
        let cache_err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(cache_err)?;
        std::io::Write::write_all(&mut tmp, &body).map_err(cache_err)?;
        tmp.as_file().sync_all().map_err(cache_err)?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(true),
            Err(e) if e.error.kind() == std::io::ErrorKind::AlreadyExists => Ok(false),
            Err(e) => Err(cache_err(e.error)),
        }
    }

    /// Serve `request` according to `mode`, calling `fetch` on a miss.
    pub async fn through<R, T, F, Fut>(
        &self,
        mode: ExecutionMode,
        id: &BackendId,
        op: &str,
        request: &R,
        fetch: F,
    ) -> Result<T, BackendError>
    where
        R: Serialize + Sync,
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let key = CacheKey::compute(id, op, request)?;
        if let Some(hit) = self.get(&key)? {
            return Ok(hit);
        }
        if mode == ExecutionMode::Replay {
            return Err(BackendError::ReplayMiss(key.to_string()));
        }
        let response = fetch().await?;
        match self.put(id, op, request, &response) {
            Ok(_) => {}
            Err(e) if mode == ExecutionMode::Live => {
                tracing::warn!(error = %e, "cache write failed");
            }
            Err(e) => return Err(e),
        }
        Ok(response)
    }
}

fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value, BackendError> {
    serde_json::to_value(v).map_err(|e| BackendError::Cache(e.to_string()))
}

/// Cache layer over an LLM. In replay mode `inner` may be absent.
pub struct CachedLlm {
    inner: Option<Arc<dyn LlmBackend>>,
    id: BackendId,
    cache: ResponseCache,
    mode: ExecutionMode,
}

impl CachedLlm {
    pub fn new(inner: Arc<dyn LlmBackend>, cache: ResponseCache, mode: ExecutionMode) -> Self {
        Self {
            id: inner.id(),
            inner: Some(inner),
            cache,
            mode,
        }
    }

    pub fn replay_only(id: BackendId, cache: ResponseCache) -> Self {
        Self {
            inner: None,
            id,
            cache,
            mode: ExecutionMode::Replay,
        }
    }
}

fn no_inner() -> BackendError {
    BackendError::unavailable("no live backend configured")
}

#[async_trait]
impl LlmBackend for CachedLlm {
    fn id(&self) -> BackendId {
        self.id.clone()
    }

    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        self.cache
            .through(self.mode, &self.id, "complete", request, || async {
                match &self.inner {
                    Some(inner) => inner.complete(request).await,
                    None => Err(no_inner()),
                }
            })
            .await
    }
}

pub struct CachedNli {
    inner: Option<Arc<dyn NliBackend>>,
    id: BackendId,
    max_input_tokens: usize,
    cache: ResponseCache,
    mode: ExecutionMode,
}

impl CachedNli {
    pub fn new(inner: Arc<dyn NliBackend>, cache: ResponseCache, mode: ExecutionMode) -> Self {
        Self {
            id: inner.id(),
            max_input_tokens: inner.max_input_tokens(),
            inner: Some(inner),
            cache,
            mode,
        }
    }

    pub fn replay_only(id: BackendId, max_input_tokens: usize, cache: ResponseCache) -> Self {
        Self {
            inner: None,
            id,
            max_input_tokens,
            cache,
            mode: ExecutionMode::Replay,
        }
    }
}

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[async_trait]
impl NliBackend for CachedNli {
    fn id(&self) -> BackendId {
        self.id.clone()
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        let request = NliRequest { premise, hypothesis };
        self.cache
            .through(self.mode, &self.id, "classify", &request, || async {
                match &self.inner {
                    Some(inner) => inner.classify(premise, hypothesis).await,
                    None => Err(no_inner()),
                }
            })
            .await
    }
}

pub struct CachedSearch {
    inner: Option<Arc<dyn SearchBackend>>,
    id: BackendId,
    cache: ResponseCache,
    mode: ExecutionMode,
}

impl CachedSearch {
    pub fn new(inner: Arc<dyn SearchBackend>, cache: ResponseCache, mode: ExecutionMode) -> Self {
        Self {
            id: inner.id(),
            inner: Some(inner),
            cache,
            mode,
        }
    }

    pub fn replay_only(id: BackendId, cache: ResponseCache) -> Self {
        Self {
            inner: None,
            id,
            cache,
            mode: ExecutionMode::Replay,
        }
    }
}

#[derive(Serialize)]
struct SearchRequest<'a> {
    query: &'a str,
    k: usize,
}

#[async_trait]
impl SearchBackend for CachedSearch {
    fn id(&self) -> BackendId {
        self.id.clone()
    }

    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
        let request = SearchRequest { query, k };
        self.cache
            .through(self.mode, &self.id, "search", &request, || async {
                match &self.inner {
                    Some(inner) => inner.search(query, k).await,
                    None => Err(no_inner()),
                }
            })
            .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{LlmRule, MockLlm, MockReply};
    use proptest::prelude::*;

    fn id() -> BackendId {
        BackendId::new("test", "m1")
    }

    #[test]
    fn key_is_canonical_and_hex() {
        let a = CacheKey::compute(&id(), "op", &json!({"b": 1, "a": [1, 2]})).unwrap();
        let b = CacheKey::compute(&id(), "op", &json!({"a": [1, 2], "b": 1})).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_str().len(), 64);
        assert!(a.as_str().chars().all(|c| c.is_ascii_hexdigit()));
        let c = CacheKey::compute(&BackendId::new("test", "m2"), "op", &json!({"a": [1, 2], "b": 1}))
            .unwrap();
        assert_ne!(a, c);
        assert_eq!(
            canonical_json(&id(), "op", &json!({"z": 1, "a": {"y": 2, "b": 3}})).unwrap(),
            r#"{"backend":"test","model":"m1","op":"op","request":{"a":{"b":3,"y":2},"z":1}}"#
        );
    }

    #[test]
    fn entries_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert!(cache.put(&id(), "op", &"req", &"first").unwrap());
        assert!(!cache.put(&id(), "op", &"req", &"second").unwrap());
        let key = CacheKey::compute(&id(), "op", &"req").unwrap();
        assert_eq!(cache.get::<String>(&key).unwrap().as_deref(), Some("first"));
    }

    #[test]
    fn concurrent_writers_converge() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let written: usize = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|i| {
                    let cache = cache.clone();
                    s.spawn(move || cache.put(&id(), "op", &"same", &format!("v{i}")).unwrap())
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap() as usize).sum()
        });
        assert_eq!(written, 1);
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let key = CacheKey::compute(&id(), "op", &"same").unwrap();
        assert!(cache.get::<String>(&key).unwrap().unwrap().starts_with('v'));
    }

    #[tokio::test]
    async fn replay_hits_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mock = Arc::new(MockLlm::new(vec![LlmRule::new(
            ["p"],
            vec![MockReply::distribution(&[("True", 0.8), ("False", 0.2)])],
        )]));
        let mut req = LlmRequest::text("p", 1, 0.0);
        req.want_logprobs = true;
        req.top_k_logprobs = 5;

        let recorder = CachedLlm::new(mock.clone(), cache.clone(), ExecutionMode::Record);
        let recorded = recorder.complete(&req).await.unwrap();
        assert_eq!(mock.call_count(), 1);

        let replay = CachedLlm::replay_only(mock.id(), cache.clone());
        assert_eq!(replay.complete(&req).await.unwrap(), recorded);
        assert_eq!(mock.call_count(), 1);

        let mut other = req.clone();
        other.prompt = "p2".into();
        assert!(matches!(
            replay.complete(&other).await,
            Err(BackendError::ReplayMiss(_))
        ));
    }

    #[tokio::test]
    async fn samples_are_keyed_by_index() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mock = Arc::new(MockLlm::new(vec![LlmRule::new(
            ["p"],
            vec![MockReply::text("a"), MockReply::text("b")],
        )]));
        let live = CachedLlm::new(mock.clone(), cache.clone(), ExecutionMode::Live);
        let mut texts = Vec::new();
        for i in 0..2 {
            let req = LlmRequest {
                sample_index: i,
                ..LlmRequest::text("p", 8, 0.7)
            };
            texts.push(live.complete(&req).await.unwrap().text);
        }
        assert_eq!(texts, ["a", "b"]);
        let replay = CachedLlm::replay_only(mock.id(), cache);
        for (i, expected) in ["a", "b"].iter().enumerate() {
            let req = LlmRequest {
                sample_index: i as u32,
                ..LlmRequest::text("p", 8, 0.7)
            };
            assert_eq!(&replay.complete(&req).await.unwrap().text, expected);
        }
    }

    #[test]
    fn mode_parsing() {
        for m in [ExecutionMode::Live, ExecutionMode::Record, ExecutionMode::Replay] {
            assert_eq!(m.to_string().parse::<ExecutionMode>().unwrap(), m);
        }
        assert!("offline".parse::<ExecutionMode>().is_err());
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(text in ".{0,64}", x in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ResponseCache::open(dir.path()).unwrap();
            let response = (text.clone(), x);
            cache.put(&id(), "op", &text, &response).unwrap();
            let key = CacheKey::compute(&id(), "op", &text).unwrap();
            let back: (String, f64) = cache.get(&key).unwrap().unwrap();
            prop_assert_eq!(back, response);
        }
    }
}
