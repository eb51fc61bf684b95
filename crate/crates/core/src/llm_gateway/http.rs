use std::net::{TcpStream, ToSocketAddrs};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::Url;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Backend, GatewayError, GenerationRequest};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub timeout: Duration,
    /// Extra attempts after a connection failure or 5xx response.
    pub retries: u32,
    /// In-flight request cap for this backend.
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            timeout: Duration::from_secs(60),
            retries: 2,
            max_in_flight: 8,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_new_tokens: u32,
    temperature: f64,
    top_p: f64,
    top_k: u32,
    stop: Vec<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Backend reached through a single JSON POST endpoint.
pub struct HttpBackend {
    endpoint: Url,
    client: Client,
    config: HttpConfig,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(endpoint: &str, config: HttpConfig) -> Result<Self, GatewayError> {
        let endpoint = Url::parse(endpoint)
            .map_err(|e| GatewayError::BackendUnreachable(format!("bad endpoint {endpoint}: {e}")))?;
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;
        Ok(HttpBackend {
            endpoint,
            client,
            limiter: Limiter::new(config.max_in_flight),
            config,
        })
    }

    pub fn endpoint(&self) -> &Url {
        &self.endpoint
    }

    /// Check that something accepts TCP connections at the endpoint address.
    pub fn preflight(&self) -> Result<(), GatewayError> {
        check_reachable(&self.endpoint, Duration::from_secs(2))
    }
}

impl Backend for HttpBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let body = WireRequest {
            prompt: &req.prompt,
            max_new_tokens: req.max_new_tokens,
            temperature: req.temperature,
            top_p: req.top_p,
            top_k: req.top_k,
            stop: req.stop_markers(),
        };
        let _permit = self.limiter.acquire();
        let reply: WireResponse =
            post_json(&self.client, &self.endpoint, &body, self.config.retries).map_err(
                |e| match e {
                    WireError::Unreachable(msg) => GatewayError::BackendUnreachable(msg),
                    WireError::Timeout => GatewayError::BackendTimeout(self.config.timeout),
                    WireError::Malformed(msg) => GatewayError::MalformedResponse(msg),
                },
            )?;
        Ok(reply.text)
    }

    fn describe(&self) -> String {
        self.endpoint.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum WireError {
    Unreachable(String),
    Timeout,
    Malformed(String),
}

/// POST a JSON body and decode a JSON reply, retrying connection failures and
/// 5xx responses up to `retries` extra times.
pub(crate) fn post_json<B: Serialize, R: DeserializeOwned>(
    client: &Client,
    url: &Url,
    body: &B,
    retries: u32,
) -> Result<R, WireError> {
    let mut last = WireError::Unreachable(format!("{url}: no attempt made"));
    for attempt in 0..=retries {
        if attempt > 0 {
            log::debug!("retrying {url} (attempt {})", attempt + 1);
        }
        match client.post(url.clone()).json(body).send() {
            Ok(resp) if resp.status().is_success() => {
                return resp
                    .json::<R>()
                    .map_err(|e| WireError::Malformed(format!("{url}: {e}")));
            }
            Ok(resp) if resp.status().is_server_error() => {
                last = WireError::Unreachable(format!("{url}: status {}", resp.status()));
            }
            Ok(resp) => {
                return Err(WireError::Malformed(format!("{url}: status {}", resp.status())));
            }
            Err(e) if e.is_timeout() => return Err(WireError::Timeout),
            Err(e) => last = WireError::Unreachable(format!("{url}: {e}")),
        }
    }
    Err(last)
}

pub(crate) fn check_reachable(url: &Url, timeout: Duration) -> Result<(), GatewayError> {
    let host = url
        .host_str()
        .ok_or_else(|| GatewayError::BackendUnreachable(format!("{url}: no host")))?;
    let port = url
        .port_or_known_default()
        .ok_or_else(|| GatewayError::BackendUnreachable(format!("{url}: no port")))?;
    let addrs = (host, port)
        .to_socket_addrs()
        .map_err(|e| GatewayError::BackendUnreachable(format!("{url}: {e}")))?;
    for addr in addrs {
        if TcpStream::connect_timeout(&addr, timeout).is_ok() {
            return Ok(());
        }
    }
    Err(GatewayError::BackendUnreachable(format!(
        "{url}: connection refused"
    )))
}

/// Counting semaphore bounding in-flight requests.
pub(crate) struct Limiter {
    free: Mutex<usize>,
    cond: Condvar,
}

pub(crate) struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub(crate) fn new(slots: usize) -> Self {
        Limiter {
            free: Mutex::new(slots.max(1)),
            cond: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cond.wait(free).expect("limiter lock");
        }
        *free -= 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.free.lock().expect("limiter lock") += 1;
        self.limiter.cond.notify_one();
    }
}
