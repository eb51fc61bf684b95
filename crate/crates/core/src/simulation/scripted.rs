//! A model-free world for exercising the full loop.
//!
//! The scripted agent repeats whatever line it is told to say, the scripted
//! client answers workflow questions according to a [`ClientPolicy`], the
//! selector matches answers exactly and the end detector always says
//! "middle". The responders read the built-in prompt layouts, so custom
//! templates need their own scripts.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{speaker_label, FREE_REPLY};
use crate::llm_gateway::{Backend, Backends, GatewayError, GenerationRequest, Role, ScriptedBackend};
use crate::textmetrics::tokenize;
use crate::workflow::{NodeId, NodeKind, WorkflowGraph, WorkflowSet};

/// Lines the agent uses when told to reply freely. They share no token with
/// any shipped workflow line.
pub const AD_LIBS: [&str; 3] = ["Hmm, interesting.", "Oh? Fascinating.", "Curious, curious."];

/// Lines the client uses when it ignores the workflow.
pub const OFF_SCRIPT_LINES: [&str; 3] = [
    "Purple turtles dance quietly.",
    "Zebras juggle pumpkins.",
    "Bicycles squeak loudly.",
];

pub const CLIENT_FAREWELL: &str = "Thank you, goodbye.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClientPolicy {
    /// Give the reference answer along the workflow's longest path.
    Cooperative,
    /// Never give a reference answer.
    OffScript,
    /// Give a random reference answer with probability `cooperation`.
    Mixed { cooperation: f64 },
}

impl fmt::Display for ClientPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientPolicy::Cooperative => f.write_str("cooperative"),
            ClientPolicy::OffScript => f.write_str("off-script"),
            ClientPolicy::Mixed { cooperation } => write!(f, "mixed:{cooperation}"),
        }
    }
}

impl FromStr for ClientPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cooperative" => Ok(ClientPolicy::Cooperative),
            "off-script" => Ok(ClientPolicy::OffScript),
            "mixed" => Ok(ClientPolicy::Mixed { cooperation: 0.7 }),
            other => {
                let p = other
                    .strip_prefix("mixed:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| format!("unknown client policy `{other}`"))?;
                Ok(ClientPolicy::Mixed { cooperation: p })
            }
        }
    }
}

struct Entry {
    graph: Arc<WorkflowGraph>,
    intention_marker: String,
    by_text: HashMap<Vec<String>, NodeId>,
    longest_answer: HashMap<NodeId, String>,
}

struct World {
    entries: Vec<Entry>,
    policy: ClientPolicy,
    salt: u64,
}

/// Responder set for the agent, client, selector and end-detector roles.
#[derive(Clone)]
pub struct ScriptedWorld {
    world: Arc<World>,
}

impl ScriptedWorld {
    pub fn new(workflows: &WorkflowSet, policy: ClientPolicy, salt: u64) -> Self {
        let entries = workflows
            .iter()
            .map(|g| {
                let by_text = g.nodes.iter().map(|n| (tokenize(&n.text), n.id)).collect();
                let mut longest_answer = HashMap::new();
                if let Some(path) = g.longest_path() {
                    for pair in path.windows(2) {
                        if let Some(e) = g.outgoing(pair[0]).find(|e| e.to == pair[1]) {
                            longest_answer.insert(pair[0], e.answer.clone());
                        }
                    }
                }
                Entry {
                    graph: Arc::clone(g),
                    intention_marker: format!("talk to the {} to {}.", g.agent_character, g.topic),
                    by_text,
                    longest_answer,
                }
            })
            .collect();
        ScriptedWorld {
            world: Arc::new(World {
                entries,
                policy,
                salt,
            }),
        }
    }

    pub fn policy(&self) -> ClientPolicy {
        self.world.policy
    }

    pub fn backends(&self) -> Backends {
        let agent: Arc<dyn Backend> = Arc::new(ScriptedBackend::responder(Role::Agent, {
            let w = Arc::clone(&self.world);
            move |req: &GenerationRequest| Ok(w.agent_reply(&req.prompt))
        }));
        let client: Arc<dyn Backend> = Arc::new(ScriptedBackend::responder(Role::Client, {
            let w = Arc::clone(&self.world);
            move |req: &GenerationRequest| w.client_reply(&req.prompt)
        }));
        let selector: Arc<dyn Backend> = Arc::new(ScriptedBackend::responder(
            Role::Selector,
            |req: &GenerationRequest| select_exact(&req.prompt),
        ));
        let detector: Arc<dyn Backend> = Arc::new(ScriptedBackend::responder(
            Role::EndDetector,
            |_: &GenerationRequest| Ok("middle".to_string()),
        ));
        Backends::new(agent, client)
            .with_selector(selector)
            .with_end_detector(detector)
    }
}

impl World {
    fn hash(&self, text: &str, extra: u8) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.salt.to_le_bytes())
            .chain_update([extra])
            .chain_update(text.as_bytes())
            .finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    fn agent_reply(&self, prompt: &str) -> String {
        let directive = directive_of(prompt).unwrap_or(FREE_REPLY);
        if directive == FREE_REPLY {
            AD_LIBS[(self.hash(prompt, 0) % AD_LIBS.len() as u64) as usize].to_string()
        } else {
            directive.to_string()
        }
    }

    fn off_script(&self, prompt: &str) -> String {
        OFF_SCRIPT_LINES[(self.hash(prompt, 1) % OFF_SCRIPT_LINES.len() as u64) as usize]
            .to_string()
    }

    fn client_reply(&self, prompt: &str) -> Result<String, GatewayError> {
        let entry = self
            .entries
            .iter()
            .find(|e| prompt.contains(&e.intention_marker))
            .ok_or_else(|| GatewayError::MalformedResponse("scripted client: unknown workflow".into()))?;
        let label = format!("{}: ", speaker_label(&entry.graph.agent_character));
        let agent_lines: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix(label.as_str()))
            .collect();
        let last = agent_lines
            .last()
            .and_then(|l| entry.by_text.get(&tokenize(l)).copied());
        // The pending question, for re-answering after an ad-lib.
        let pending = agent_lines
            .iter()
            .rev()
            .find_map(|l| entry.by_text.get(&tokenize(l)).copied());

        let graph = &entry.graph;
        if let Some(node) = last {
            if graph.node(node).kind == NodeKind::Terminal {
                return Ok(CLIENT_FAREWELL.to_string());
            }
        }
        let reply = match self.policy {
            ClientPolicy::OffScript => self.off_script(prompt),
            ClientPolicy::Cooperative => match pending {
                Some(node) if graph.node(node).kind == NodeKind::Question => entry
                    .longest_answer
                    .get(&node)
                    .cloned()
                    .or_else(|| graph.outgoing(node).next().map(|e| e.answer.clone()))
                    .unwrap_or_else(|| self.off_script(prompt)),
                _ => self.off_script(prompt),
            },
            ClientPolicy::Mixed { cooperation } => match last {
                Some(node) => {
                    let u = (self.hash(prompt, 2) >> 11) as f64 / (1u64 << 53) as f64;
                    let answers: Vec<_> = graph.outgoing(node).collect();
                    if u < cooperation && !answers.is_empty() {
                        let i = (self.hash(prompt, 3) % answers.len() as u64) as usize;
                        answers[i].answer.clone()
                    } else {
                        self.off_script(prompt)
                    }
                }
                None => self.off_script(prompt),
            },
        };
        Ok(reply)
    }
}

/// The text after the last "Now, you must say " up to the closing sentinel.
fn directive_of(prompt: &str) -> Option<&str> {
    const MARKER: &str = "Now, you must say ";
    let start = prompt.rfind(MARKER)? + MARKER.len();
    let rest = &prompt[start..];
    let end = rest.find("\n<|im_end|>").unwrap_or(rest.len());
    let line = &rest[..end];
    Some(line.strip_suffix('.').unwrap_or(line))
}

fn select_exact(prompt: &str) -> Result<String, GatewayError> {
    const SENTENCE: &str = "Take the following sentence: ";
    let sentence = prompt
        .lines()
        .find_map(|l| l.strip_prefix(SENTENCE))
        .ok_or_else(|| GatewayError::MalformedResponse("scripted selector: no sentence".into()))?;
    let sentence = tokenize(sentence.strip_suffix('.').unwrap_or(sentence));
    let options: Vec<(usize, &str)> = prompt
        .lines()
        .filter_map(|l| {
            let (num, text) = l.split_once(". ")?;
            Some((num.parse().ok()?, text))
        })
        .collect();
    let none = options.len();
    let hit = options
        .iter()
        .find(|(_, text)| *text != "None of the above" && tokenize(text) == sentence)
        .map(|(k, _)| *k)
        .unwrap_or(none);
    Ok(hit.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textmetrics::rouge_l;

    #[test]
    fn policy_grammar() {
        assert_eq!("cooperative".parse::<ClientPolicy>().unwrap(), ClientPolicy::Cooperative);
        assert_eq!("off-script".parse::<ClientPolicy>().unwrap(), ClientPolicy::OffScript);
        assert_eq!(
            "mixed:0.25".parse::<ClientPolicy>().unwrap(),
            ClientPolicy::Mixed { cooperation: 0.25 }
        );
        assert!("mixed:2".parse::<ClientPolicy>().is_err());
        let p = ClientPolicy::Mixed { cooperation: 0.5 };
        assert_eq!(p.to_string().parse::<ClientPolicy>().unwrap(), p);
    }

    #[test]
    fn canned_lines_share_no_tokens_with_workflows() {
        let set = WorkflowSet::builtin();
        for g in set.iter() {
            for node in &g.nodes {
                for line in AD_LIBS.iter().chain(OFF_SCRIPT_LINES.iter()) {
                    assert_eq!(rouge_l(line, &node.text).f1, 0.0, "{line} vs {}", node.text);
                }
            }
            for e in &g.edges {
                for line in OFF_SCRIPT_LINES {
                    assert_eq!(rouge_l(line, &e.answer).f1, 0.0, "{line} vs {}", e.answer);
                }
            }
        }
        for line in AD_LIBS.iter().chain(OFF_SCRIPT_LINES.iter()) {
            assert!(!super::super::contains_keyphrase(line));
        }
    }

    #[test]
    fn directive_extraction() {
        let p = "<|im_start|>\nYou are playing a doctor.\nNow, you must say Good day, how can I help you?.\n<|im_end|>";
        assert_eq!(directive_of(p), Some("Good day, how can I help you?"));
    }

    #[test]
    fn selector_exact_match() {
        let p = "Take the following sentence: I want to buy a longsword.\nOnly select:\n\n1. I am just browsing\n2. I want to buy a longsword\n3. None of the above\n\nCorrect answer:";
        assert_eq!(select_exact(p).unwrap(), "2");
        let p = "Take the following sentence: hello.\n\n1. a\n2. None of the above\n";
        assert_eq!(select_exact(p).unwrap(), "2");
    }
}
