//! JSON-over-HTTP plumbing shared by every remote backend: a transport
//! trait, a reqwest implementation, retry with exponential backoff, and an
//! in-flight request limiter.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

use crate::error::ProviderError;

pub trait JsonTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, ProviderError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Fatal(format!("http client: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, ProviderError> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Retriable(format!("{url}: {e}"))
            } else {
                ProviderError::Fatal(format!("{url}: {e}"))
            }
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Retriable(format!("{url}: HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::Fatal(format!(
                "{url}: HTTP {status}: {text}"
            )));
        }
        resp.json::<Value>()
            .map_err(|e| ProviderError::Validation(format!("{url}: response is not JSON: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails with a non-retriable error, or
    /// `max_attempts` is reached.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt + 1 < attempts => {
                    tracing::warn!(attempt = attempt + 1, error = %e, "retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct Limiter {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(limit: usize) -> Self {
        Limiter {
            permits: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

/// Replays canned responses in order and records every request body.
/// Used to test remote backends against stored wire fixtures.
#[derive(Default)]
pub struct ReplayTransport {
    responses: Mutex<VecDeque<Result<Value, ProviderError>>>,
    requests: Mutex<Vec<(String, Value)>>,
}

impl ReplayTransport {
    pub fn new(responses: impl IntoIterator<Item = Result<Value, ProviderError>>) -> Self {
        ReplayTransport {
            responses: Mutex::new(responses.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<(String, Value)> {
        self.requests.lock().unwrap().clone()
    }
}

impl JsonTransport for ReplayTransport {
    fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, ProviderError> {
        self.requests
            .lock()
            .unwrap()
            .push((url.to_string(), body.clone()));
        self.responses
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ProviderError::Fatal("replay exhausted".into())))
    }
}

pub(crate) fn api_key(var: &'static str) -> Result<String, ProviderError> {
    std::env::var(var).map_err(|_| ProviderError::MissingApiKey(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn retries_transient_then_succeeds() {
        let t = ReplayTransport::new([
            Err(ProviderError::Retriable("503".into())),
            Err(ProviderError::Retriable("timeout".into())),
            Ok(json!({"ok": true})),
        ]);
        let out = RetryPolicy::no_delay(3)
            .run(|| t.post_json("u", None, &json!({})))
            .unwrap();
        assert_eq!(out, json!({"ok": true}));
        assert_eq!(t.requests().len(), 3);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let t = ReplayTransport::new((0..5).map(|_| Err(ProviderError::Retriable("503".into()))));
        let err = RetryPolicy::no_delay(3)
            .run(|| t.post_json("u", None, &json!({})))
            .unwrap_err();
        assert!(err.is_retriable());
        assert_eq!(t.requests().len(), 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let t = ReplayTransport::new([Err(ProviderError::Fatal("401".into())), Ok(json!(1))]);
        assert!(RetryPolicy::no_delay(3)
            .run(|| t.post_json("u", None, &json!({})))
            .is_err());
        assert_eq!(t.requests().len(), 1);
    }

    #[test]
    fn backoff_is_exponential_and_capped() {
        let p = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(300),
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(300));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(Limiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (l, a, p) = (limiter.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _permit = l.acquire();
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    a.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
