//! Blocking JSON-over-HTTP transport shared by the remote edit oracle and the
//! LLM planner backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_BODY: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Per-attempt timeout in seconds.
    pub timeout_secs: f64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry in seconds; doubles after each retry.
    pub backoff_secs: f64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            timeout_secs: 30.0,
            retries: 3,
            backoff_secs: 0.5,
        }
    }
}

impl HttpConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

fn attempt(agent: &ureq::Agent, url: &str, body: &[u8], timeout: Duration) -> Result<Vec<u8>> {
    let resp = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body);
    let mut resp = match resp {
        Ok(r) => r,
        Err(ureq::Error::Timeout(_)) => return Err(Error::Timeout(timeout)),
        Err(ureq::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            return Err(Error::Timeout(timeout))
        }
        Err(e) => return Err(Error::ServiceUnavailable(format!("{url}: {e}"))),
    };
    let status = resp.status().as_u16();
    if status != 200 {
        return Err(Error::ServiceUnavailable(format!("{url}: HTTP {status}")));
    }
    match resp.body_mut().with_config().limit(MAX_BODY).read_to_vec() {
        Ok(bytes) => Ok(bytes),
        Err(ureq::Error::Timeout(_)) => Err(Error::Timeout(timeout)),
        Err(e) => Err(Error::ServiceUnavailable(format!("{url}: reading body: {e}"))),
    }
}

/// POSTs `body` as JSON and decodes the JSON reply. Transport failures and
/// timeouts are retried with exponential backoff; an undecodable reply is
/// reported immediately as [`Error::MalformedResponse`].
pub fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(url: &str, body: &B, config: &HttpConfig) -> Result<R> {
    let timeout = config.timeout();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let payload = serde_json::to_vec(body)?;
    let mut delay = Duration::from_secs_f64(config.backoff_secs.max(0.0));
    let mut last = None;
    for n in 0..=config.retries {
        if n > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match attempt(&agent, url, &payload, timeout) {
            Ok(bytes) => {
                return serde_json::from_slice(&bytes).map_err(|e| Error::MalformedResponse(format!("{url}: {e}")));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Joins a base endpoint and a route without doubling slashes.
pub fn join(endpoint: &str, route: &str) -> String {
    format!("{}/{}", endpoint.trim_end_matches('/'), route.trim_start_matches('/'))
}
