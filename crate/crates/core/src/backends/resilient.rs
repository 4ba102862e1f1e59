//! Bounded in-flight requests and exponential backoff on transient errors.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use super::{
    BackendError, BackendId, EvidenceSnippet, LlmBackend, LlmRequest, LlmResponse, NliBackend,
    NliScores, SearchBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts, first call included.
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; the delay doubles after every failure
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

pub struct Resilient<B> {
    inner: B,
    permits: Arc<Semaphore>,
    policy: RetryPolicy,
}

impl<B> Resilient<B> {
    pub fn new(inner: B, max_in_flight: usize, policy: RetryPolicy) -> Self {
        Self {
            inner,
            permits: Arc::new(Semaphore::new(max_in_flight.max(1))),
            policy,
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    async fn run<T, F, Fut>(&self, op: &str, mut call: F) -> Result<T, BackendError>
    where
        F: FnMut() -> Fut,
        Fut: Future<Output = Result<T, BackendError>>,
    {
        let attempts = self.policy.attempts.max(1);
        let mut attempt = 1;
        loop {
            let result = {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .map_err(|_| BackendError::unavailable("backend shut down"))?;
                call().await
            };
            match result {
                Err(e) if e.is_transient() && attempt < attempts => {
                    let delay = self.policy.delay_before(attempt);
                    tracing::warn!(op, attempt, max_attempts = attempts, error = %e, ?delay, "retrying");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    tracing::error!(op, attempt, error = %e, "giving up after bounded retries");
                    return Err(e);
                }
                other => return other,
            }
        }
    }
}

#[async_trait]
impl<B: LlmBackend> LlmBackend for Resilient<B> {
    fn id(&self) -> BackendId {
        self.inner.id()
    }

    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        self.run("complete", || self.inner.complete(request)).await
    }
}

#[async_trait]
impl<B: NliBackend> NliBackend for Resilient<B> {
    fn id(&self) -> BackendId {
        self.inner.id()
    }

    fn max_input_tokens(&self) -> usize {
        self.inner.max_input_tokens()
    }

    async fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliScores, BackendError> {
        self.run("classify", || self.inner.classify(premise, hypothesis))
            .await
    }
}

#[async_trait]
impl<B: SearchBackend> SearchBackend for Resilient<B> {
    fn id(&self) -> BackendId {
        self.inner.id()
    }

    async fn search(&self, query: &str, k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
        self.run("search", || self.inner.search(query, k)).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{LlmRule, MockLlm, MockReply};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 1,
        }
    }

    #[tokio::test]
    async fn transient_failures_are_retried() {
        let mock = MockLlm::new(vec![LlmRule::new(
            ["p"],
            vec![MockReply::failure("503"), MockReply::failure("503"), MockReply::text("ok")],
        )]);
        let b = Resilient::new(mock, 4, fast());
        let out = b.complete(&LlmRequest::text("p", 4, 0.0)).await.unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(b.inner().call_count(), 3);
    }

    #[tokio::test]
    async fn retries_are_bounded() {
        let mock = MockLlm::new(vec![LlmRule::new(["p"], vec![MockReply::failure("503")])]);
        let b = Resilient::new(mock, 4, fast());
        assert!(b.complete(&LlmRequest::text("p", 4, 0.0)).await.is_err());
        assert_eq!(b.inner().call_count(), 3);
    }

    #[tokio::test]
    async fn permanent_errors_are_not_retried() {
        let b = Resilient::new(MockLlm::default(), 4, fast());
        assert!(b.complete(&LlmRequest::text("p", 4, 0.0)).await.is_err());
        assert_eq!(b.inner().call_count(), 1);
    }

    struct Gauge {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    #[async_trait]
    impl SearchBackend for Gauge {
        fn id(&self) -> BackendId {
            BackendId::new("gauge", "gauge")
        }

        async fn search(&self, _q: &str, _k: usize) -> Result<Vec<EvidenceSnippet>, BackendError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(5)).await;
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(Vec::new())
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn in_flight_requests_are_bounded() {
        let b = Arc::new(Resilient::new(
            Gauge {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            2,
            fast(),
        ));
        let tasks: Vec<_> = (0..10)
            .map(|_| {
                let b = b.clone();
                tokio::spawn(async move { b.search("q", 1).await })
            })
            .collect();
        for t in tasks {
            t.await.unwrap().unwrap();
        }
        assert!(b.inner().peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::from_millis(500));
        assert_eq!(p.delay_before(2), Duration::from_millis(1000));
    }
}
