use std::collections::VecDeque;
use std::sync::Mutex;

use super::{Backend, GatewayError, GenerationRequest, Role};

pub type Responder = dyn Fn(&GenerationRequest) -> Result<String, GatewayError> + Send + Sync;

enum Script {
    Queue(VecDeque<Result<String, GatewayError>>),
    Responder(Box<Responder>),
}

/// A backend that needs no model: either a queue of canned replies popped in
/// order, or a function of the request.
pub struct ScriptedBackend {
    role: Role,
    script: Mutex<Script>,
}

impl ScriptedBackend {
    pub fn queue<I, S>(role: Role, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::queue_results(role, replies.into_iter().map(|r| Ok(r.into())))
    }

    /// Queue that may also hold failures, for error-path tests.
    pub fn queue_results<I>(role: Role, replies: I) -> Self
    where
        I: IntoIterator<Item = Result<String, GatewayError>>,
    {
        ScriptedBackend {
            role,
            script: Mutex::new(Script::Queue(replies.into_iter().collect())),
        }
    }

    pub fn responder<F>(role: Role, f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<String, GatewayError> + Send + Sync + 'static,
    {
        ScriptedBackend {
            role,
            script: Mutex::new(Script::Responder(Box::new(f))),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Replies left in a queue script; `None` for responders.
    pub fn remaining(&self) -> Option<usize> {
        match &*self.script.lock().expect("script lock") {
            Script::Queue(q) => Some(q.len()),
            Script::Responder(_) => None,
        }
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let mut script = self.script.lock().expect("script lock");
        match &mut *script {
            Script::Queue(queue) => queue
                .pop_front()
                .unwrap_or(Err(GatewayError::BackendExhausted(self.role))),
            Script::Responder(f) => f(req),
        }
    }

    fn describe(&self) -> String {
        format!("scripted:{}", self.role)
    }
}
