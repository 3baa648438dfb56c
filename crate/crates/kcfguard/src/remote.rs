//! HTTP completion backend: `POST <endpoint>/complete`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use kcfguard_core::gateway::parse_wire_response;
use kcfguard_core::{CompletionBackend, CompletionRequest, GatewayError};

pub const ENDPOINT_ENV: &str = "KCFGUARD_ENDPOINT";
pub const TIMEOUT_ENV: &str = "KCFGUARD_TIMEOUT_MS";
pub const TOKEN_ENV: &str = "KCFGUARD_TOKEN";
pub const DEFAULT_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

/// One HTTP exchange. Returns status and body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
                TransportError::Timeout
            }
            other => TransportError::Other(other.to_string()),
        };
        let mut resp = req.send(body).map_err(map_err)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok((status, text))
    }
}

/// Counts calls before delegating; used to prove mock runs stay offline.
pub struct CountingTransport {
    inner: Arc<dyn Transport>,
    calls: AtomicUsize,
}

impl CountingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        CountingTransport {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for CountingTransport {
    fn post_json(
        &self,
        url: &str,
        body: &str,
        bearer: Option<&str>,
        timeout: Duration,
    ) -> Result<(u16, String), TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, body, bearer, timeout)
    }
}

#[derive(Clone)]
pub struct RemoteBackend {
    endpoint: String,
    token: Option<String>,
    timeout: Duration,
    retries_on_timeout: u32,
    transport: Arc<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, transport: Arc<dyn Transport>) -> Self {
        RemoteBackend {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            token: None,
            timeout: Duration::from_millis(DEFAULT_TIMEOUT_MS),
            retries_on_timeout: 1,
            transport,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries_on_timeout: u32) -> Self {
        self.retries_on_timeout = retries_on_timeout;
        self
    }

    pub fn url(&self) -> String {
        format!("{}/complete", self.endpoint)
    }
}

impl CompletionBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn is_remote(&self) -> bool {
        true
    }

    fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let body = request.wire_json();
        let url = self.url();
        let mut attempt = 0;
        loop {
            match self
                .transport
                .post_json(&url, &body, self.token.as_deref(), self.timeout)
            {
                Ok((status, text)) if (200..300).contains(&status) => {
                    return parse_wire_response(&text)
                }
                Ok((status, _)) => return Err(GatewayError::HttpError { status }),
                Err(TransportError::Timeout) if attempt < self.retries_on_timeout => attempt += 1,
                Err(TransportError::Timeout) => {
                    return Err(GatewayError::Timeout {
                        millis: self.timeout.as_millis() as u64,
                    })
                }
                Err(TransportError::Other(m)) => return Err(GatewayError::Transport(m)),
            }
        }
    }
}
