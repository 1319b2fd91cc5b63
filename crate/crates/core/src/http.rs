//! Minimal blocking JSON-over-HTTP transport shared by the model gateway,
//! the embedding client and the remote retrieval backend.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

static REQUESTS_ISSUED: AtomicU64 = AtomicU64::new(0);

/// Number of HTTP requests issued by [`UreqTransport`] in this process.
/// Tests use it to prove that offline code paths never touch the network.
pub fn requests_issued() -> u64 {
    REQUESTS_ISSUED.load(Ordering::SeqCst)
}

#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("{0}")]
    Other(String),
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;

    fn get(&self, url: &str, bearer: Option<&str>, timeout: Duration)
        -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Default, Clone)]
pub struct UreqTransport;

impl UreqTransport {
    fn agent(timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }
}

fn map_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
        ureq::Error::Io(io) => TransportError::Connection(io.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            TransportError::Connection(e.to_string())
        }
        other => TransportError::Other(other.to_string()),
    }
}

fn into_reply(mut resp: ureq::http::Response<ureq::Body>) -> Result<HttpReply, TransportError> {
    let status = resp.status().as_u16();
    let body = resp
        .body_mut()
        .read_to_string()
        .map_err(|e| TransportError::Other(e.to_string()))?;
    Ok(HttpReply { status, body })
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        REQUESTS_ISSUED.fetch_add(1, Ordering::SeqCst);
        let mut req = Self::agent(timeout).post(url);
        if let Some(key) = bearer {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        into_reply(req.send_json(body).map_err(map_ureq)?)
    }

    fn get(
        &self,
        url: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        REQUESTS_ISSUED.fetch_add(1, Ordering::SeqCst);
        let mut req = Self::agent(timeout).get(url);
        if let Some(key) = bearer {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        into_reply(req.call().map_err(map_ureq)?)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit { limiter: self }
    }
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.available.lock().expect("limiter poisoned");
        *n += 1;
        self.limiter.freed.notify_one();
    }
}
