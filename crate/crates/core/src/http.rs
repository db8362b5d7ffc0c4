//! Blocking JSON-over-HTTP with bounded retries, shared by the remote encoder
//! and chat clients.

use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tracing::warn;

/// Attempts and backoff for remote backends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 250,
            timeout_ms: 120_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempts: u32) -> Duration {
        let shift = failed_attempts.saturating_sub(1).min(16);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << shift))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("{endpoint}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        endpoint: String,
        attempts: u32,
        last: String,
    },
    #[error("{endpoint}: HTTP {status}: {body}")]
    Rejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("{endpoint}: malformed response: {reason}")]
    Malformed { endpoint: String, reason: String },
}

pub(crate) struct JsonClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
    bearer: Option<String>,
}

impl JsonClient {
    /// `api_key_env` names the variable holding a bearer token. It is read
    /// once here; an unset variable sends no `Authorization` header.
    pub fn new(retry: RetryPolicy, api_key_env: Option<&str>) -> Self {
        let bearer = api_key_env.and_then(|var| match std::env::var(var) {
            Ok(v) if !v.is_empty() => Some(v),
            _ => {
                warn!(var, "API key variable is unset; sending requests without authorization");
                None
            }
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(retry.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent, retry, bearer }
    }

    /// POSTs `body` and decodes the JSON response.
    ///
    /// Transport errors, 429 and 5xx are retried; other 4xx fail immediately.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, endpoint: &str, body: &B) -> Result<R, HttpError> {
        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            let mut req = self.agent.post(endpoint);
            if let Some(token) = &self.bearer {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            match req.send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if (200..300).contains(&status) {
                        return resp.body_mut().read_json::<R>().map_err(|e| HttpError::Malformed {
                            endpoint: endpoint.to_string(),
                            reason: e.to_string(),
                        });
                    }
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status == 429 || status >= 500 {
                        last = format!("HTTP {status}: {text}");
                    } else {
                        return Err(HttpError::Rejected {
                            endpoint: endpoint.to_string(),
                            status,
                            body: text,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            warn!(endpoint, attempt, error = %last, "backend request failed");
        }
        Err(HttpError::Exhausted {
            endpoint: endpoint.to_string(),
            attempts,
            last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_backoff_schedule() {
        let p = RetryPolicy::default();
        assert_eq!(p.attempts, 3);
        assert_eq!(p.backoff(1), Duration::from_millis(250));
        assert_eq!(p.backoff(2), Duration::from_millis(500));
    }

    #[test]
    fn unreachable_endpoint_exhausts() {
        let client = JsonClient::new(
            RetryPolicy {
                attempts: 2,
                initial_backoff_ms: 1,
                timeout_ms: 500,
            },
            None,
        );
        // Port 9 (discard) on localhost is closed in the sandbox.
        let err = client
            .post::<_, serde_json::Value>("http://127.0.0.1:9/x", &serde_json::json!({}))
            .unwrap_err();
        assert!(matches!(err, HttpError::Exhausted { attempts: 2, .. }));
    }
}
