//! Request/response transport for the remote backends.
//!
//! Every remote exchange is one POST of a JSON body to `<base>/<path>` that
//! answers with one JSON body. The paths and field names are documented in
//! `docs/wire-protocol.md`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError>;
}

/// Caps the number of concurrent requests. Each caller holds its own permit
/// for the whole exchange, so request/response pairing is never shuffled.
#[derive(Debug)]
pub struct InFlightLimit {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    owner: &'a InFlightLimit,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit { owner: self }
    }

    pub fn active(&self) -> usize {
        *self.active.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.owner.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.owner.freed.notify_one();
    }
}

/// Plain HTTP/1.1 transport.
#[cfg(feature = "remote")]
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

#[cfg(feature = "remote")]
impl HttpTransport {
    pub fn new(base: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }
}

#[cfg(feature = "remote")]
impl Transport for HttpTransport {
    fn post(&self, path: &str, body: &Value, timeout: Duration) -> Result<Value, TransportError> {
        let url = format!("{}/{}", self.base, path.trim_start_matches('/'));
        let payload =
            serde_json::to_string(body).map_err(|e| TransportError::Protocol(e.to_string()))?;
        let result = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .content_type("application/json")
            .send(payload.as_str());
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => {
                return Err(TransportError::Timeout)
            }
            Err(e) => return Err(TransportError::Unreachable(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(TransportError::Timeout),
            Err(e) => return Err(TransportError::Protocol(e.to_string())),
        };
        if status != 200 {
            return Err(TransportError::Protocol(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}
