use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rcms_core::wire::{Envelope, Kind, WireError, DEFAULT_TIMEOUT, ENVELOPE_PATH};
use reqwest::header::CONTENT_TYPE;

/// Envelope exchange with a remote service.
///
/// `url` is either a service base URL, in which case the envelope path is
/// appended, or a full endpoint URL such as a subscriber callback.
#[async_trait]
pub trait Transport: Send + Sync {
    /// Sends a request envelope and waits for the reply addressed to it.
    async fn request(&self, url: &str, env: &Envelope, timeout: Duration) -> Result<Envelope, WireError>;

    /// One-way delivery; success means the receiver answered 2xx.
    async fn push(&self, url: &str, env: &Envelope) -> Result<(), WireError>;
}

pub fn endpoint(url: &str) -> String {
    let trimmed = url.trim_end_matches('/');
    let path_start = trimmed
        .find("://")
        .map(|i| i + 3)
        .and_then(|i| trimmed[i..].find('/').map(|j| i + j));
    match path_start {
        Some(_) => trimmed.to_string(),
        None => format!("{trimmed}{ENVELOPE_PATH}"),
    }
}

pub fn check_reply(req: &Envelope, rep: &Envelope) -> Result<(), WireError> {
    if rep.correlation_id != Some(req.id) {
        return Err(WireError::Protocol(format!(
            "reply {} correlates to {:?}, expected {}",
            rep.id, rep.correlation_id, req.id
        )));
    }
    if !rep.kind.needs_correlation() {
        return Err(WireError::Protocol(format!("reply has request kind {}", rep.kind)));
    }
    Ok(())
}

#[derive(Clone)]
pub struct HttpTransport {
    client: reqwest::Client,
    push_timeout: Duration,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpTransport {
    pub fn new() -> Self {
        let client = reqwest::Client::builder()
            .no_proxy()
            .pool_idle_timeout(Duration::from_secs(30))
            .tcp_nodelay(true)
            .build()
            .expect("http client");
        Self {
            client,
            push_timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_push_timeout(mut self, timeout: Duration) -> Self {
        self.push_timeout = timeout;
        self
    }

    pub fn shared() -> Arc<dyn Transport> {
        Arc::new(Self::new())
    }

    async fn post(&self, url: &str, env: &Envelope, timeout: Duration) -> Result<(u16, Vec<u8>), WireError> {
        let body = env.encode()?;
        let send = self
            .client
            .post(endpoint(url))
            .header(CONTENT_TYPE, "application/json")
            .body(body)
            .send();
        // The outer timeout covers connect, headers and body together.
        let fut = async {
            let resp = send.await.map_err(map_reqwest)?;
            let status = resp.status().as_u16();
            let bytes = resp.bytes().await.map_err(map_reqwest)?;
            Ok::<_, WireError>((status, bytes.to_vec()))
        };
        tokio::time::timeout(timeout, fut)
            .await
            .map_err(|_| WireError::Timeout(timeout))?
    }
}

fn map_reqwest(e: reqwest::Error) -> WireError {
    if e.is_timeout() {
        WireError::Timeout(DEFAULT_TIMEOUT)
    } else {
        WireError::Transport(e.to_string())
    }
}

#[async_trait]
impl Transport for HttpTransport {
    async fn request(&self, url: &str, env: &Envelope, timeout: Duration) -> Result<Envelope, WireError> {
        if !env.kind.is_request() {
            return Err(WireError::Protocol(format!("{} is not a request kind", env.kind)));
        }
        let (status, bytes) = self.post(url, env, timeout).await?;
        let rep = Envelope::decode(&bytes)
            .map_err(|e| WireError::Protocol(format!("HTTP {status} with undecodable reply: {e}")))?;
        check_reply(env, &rep)?;
        Ok(rep)
    }

    async fn push(&self, url: &str, env: &Envelope) -> Result<(), WireError> {
        if !env.kind.is_push() {
            return Err(WireError::Protocol(format!("{} is not a push kind", env.kind)));
        }
        let (status, _) = self.post(url, env, self.push_timeout).await?;
        if (200..300).contains(&status) {
            Ok(())
        } else {
            Err(WireError::Transport(format!("receiver answered HTTP {status}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentRecord {
    pub url: String,
    pub kind: Kind,
    pub body: &'static str,
}

/// Wraps a transport and records what goes through it and how many
/// requests were outstanding at once.
pub struct Instrumented {
    inner: Arc<dyn Transport>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    sent: Mutex<Vec<SentRecord>>,
}

impl Instrumented {
    pub fn new(inner: Arc<dyn Transport>) -> Arc<Self> {
        Arc::new(Self {
            inner,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            sent: Mutex::new(Vec::new()),
        })
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.peak.store(0, Ordering::SeqCst);
        self.sent.lock().clear();
    }

    pub fn sent(&self) -> Vec<SentRecord> {
        self.sent.lock().clone()
    }

    fn enter(&self, url: &str, env: &Envelope) -> InFlight<'_> {
        self.sent.lock().push(SentRecord {
            url: url.to_string(),
            kind: env.kind,
            body: env.body.tag(),
        });
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        InFlight(&self.in_flight)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

#[async_trait]
impl Transport for Instrumented {
    async fn request(&self, url: &str, env: &Envelope, timeout: Duration) -> Result<Envelope, WireError> {
        let _g = self.enter(url, env);
        self.inner.request(url, env, timeout).await
    }

    async fn push(&self, url: &str, env: &Envelope) -> Result<(), WireError> {
        let _g = self.enter(url, env);
        self.inner.push(url, env).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_paths() {
        assert_eq!(endpoint("http://127.0.0.1:80"), "http://127.0.0.1:80/rcms/v1/envelope");
        assert_eq!(endpoint("http://127.0.0.1:80/"), "http://127.0.0.1:80/rcms/v1/envelope");
        assert_eq!(endpoint("http://h:1/cb/sub-1"), "http://h:1/cb/sub-1");
    }
}
