//! Access to text-generation backends and the prompt templates.
//!
//! Every backend speaks the same minimal contract: a [`GenerationRequest`] in,
//! raw completion text out. [`complete`] wraps a backend call and cuts the
//! completion at the first speaker marker it finds, whether or not the backend
//! honoured the `stop` list.

pub(crate) mod http;
mod scripted;
mod template;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{Responder, ScriptedBackend};
pub use template::{render_prompt, PromptSet, PromptTemplate, TemplateName};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("missing template slot `{0}`")]
    MissingSlot(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend timed out after {0:?}")]
    BackendTimeout(Duration),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("scripted {0} backend has no replies left")]
    BackendExhausted(Role),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Agent,
    Client,
    Selector,
    EndDetector,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Agent => "agent",
            Role::Client => "client",
            Role::Selector => "selector",
            Role::EndDetector => "end_detector",
        })
    }
}

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 100;
pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_TOP_K: u32 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    /// Speaker names; generation stops once `<name>:` is produced.
    pub stop_names: Vec<String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            top_k: DEFAULT_TOP_K,
            stop_names: Vec::new(),
        }
    }

    pub fn with_sampling(mut self, sampling: &SamplingParams) -> Self {
        self.max_new_tokens = sampling.max_new_tokens;
        self.temperature = sampling.temperature;
        self.top_p = sampling.top_p;
        self.top_k = sampling.top_k;
        self
    }

    pub fn with_stop_names<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.stop_names = names.into_iter().map(Into::into).collect();
        self
    }

    /// Stop strings as sent on the wire: one `<name>:` marker per speaker.
    pub fn stop_markers(&self) -> Vec<String> {
        self.stop_names.iter().map(|n| format!("{n}:")).collect()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Sampling parameters shared by all generation calls of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// A text-generation backend.
pub trait Backend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError>;

    fn describe(&self) -> String;
}

/// Run a request against a backend and apply the local stop-marker cut.
pub fn complete(backend: &dyn Backend, req: &GenerationRequest) -> Result<String, GatewayError> {
    req.validate()?;
    let text = backend.generate(req)?;
    Ok(truncate_at_stop(&text, &req.stop_markers()).to_string())
}

/// Cut `text` at the earliest occurrence of any marker.
pub fn truncate_at_stop<'a>(text: &'a str, markers: &[String]) -> &'a str {
    let cut = markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| text.find(m.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// The four backend roles of a self-talk run.
#[derive(Clone)]
pub struct Backends {
    pub agent: Arc<dyn Backend>,
    pub client: Arc<dyn Backend>,
    pub selector: Arc<dyn Backend>,
    pub end_detector: Arc<dyn Backend>,
}

impl Backends {
    /// Selector and end detector default to the client backend.
    pub fn new(agent: Arc<dyn Backend>, client: Arc<dyn Backend>) -> Self {
        Backends {
            agent,
            selector: Arc::clone(&client),
            end_detector: Arc::clone(&client),
            client,
        }
    }

    pub fn with_selector(mut self, selector: Arc<dyn Backend>) -> Self {
        self.selector = selector;
        self
    }

    pub fn with_end_detector(mut self, end_detector: Arc<dyn Backend>) -> Self {
        self.end_detector = end_detector;
        self
    }

    pub fn get(&self, role: Role) -> &Arc<dyn Backend> {
        match role {
            Role::Agent => &self.agent,
            Role::Client => &self.client,
            Role::Selector => &self.selector,
            Role::EndDetector => &self.end_detector,
        }
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("agent", &self.agent.describe())
            .field("client", &self.client.describe())
            .field("selector", &self.selector.describe())
            .field("end_detector", &self.end_detector.describe())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults() {
        let req = GenerationRequest::new("hi");
        assert_eq!(req.max_new_tokens, 100);
        assert_eq!(req.temperature, 0.8);
        assert_eq!(req.top_p, 0.95);
        assert_eq!(req.top_k, 50);
        assert!(req.validate().is_ok());
    }

    #[test]
    fn request_validation() {
        let mut req = GenerationRequest::new("hi");
        req.top_p = 0.0;
        assert!(req.validate().is_err());
        let mut req = GenerationRequest::new("hi");
        req.temperature = 0.0;
        assert!(req.validate().is_err());
    }

    #[test]
    fn scripted_echo_and_stop_cut() {
        let agent = ScriptedBackend::queue(Role::Agent, ["Good day, how can I help you?"]);
        let req = GenerationRequest::new("prompt");
        assert_eq!(complete(&agent, &req).unwrap(), "Good day, how can I help you?");

        let chatty = ScriptedBackend::queue(Role::Client, ["I want a sword.\nShop keeper: Sure"]);
        let req = GenerationRequest::new("prompt").with_stop_names(["Shop keeper"]);
        assert_eq!(complete(&chatty, &req).unwrap(), "I want a sword.\n");
    }

    #[test]
    fn complete_leaves_request_untouched() {
        let b = ScriptedBackend::responder(Role::Agent, |req: &GenerationRequest| {
            Ok(req.prompt.to_uppercase())
        });
        let req = GenerationRequest::new("abc").with_stop_names(["X"]);
        let before = req.clone();
        let a = complete(&b, &req).unwrap();
        let b2 = complete(&b, &req).unwrap();
        assert_eq!(req, before);
        assert_eq!(a, b2);
    }

    #[test]
    fn default_roles_share_client() {
        let agent: Arc<dyn Backend> = Arc::new(ScriptedBackend::queue(Role::Agent, ["a"]));
        let client: Arc<dyn Backend> = Arc::new(ScriptedBackend::queue(Role::Client, ["c"]));
        let b = Backends::new(agent, Arc::clone(&client));
        assert!(Arc::ptr_eq(&b.selector, &client));
        assert!(Arc::ptr_eq(&b.end_detector, &client));
    }
}
