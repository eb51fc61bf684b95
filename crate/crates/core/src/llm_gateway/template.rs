use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Agent,
    Client,
    WorkflowManager,
    EndDetection,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        TemplateName::Agent,
        TemplateName::Client,
        TemplateName::WorkflowManager,
        TemplateName::EndDetection,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateName::Agent => "agent.txt",
            TemplateName::Client => "client.txt",
            TemplateName::WorkflowManager => "workflow_manager.txt",
            TemplateName::EndDetection => "end_detection.txt",
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateName::Agent => include_str!("../../prompts/agent.txt"),
            TemplateName::Client => include_str!("../../prompts/client.txt"),
            TemplateName::WorkflowManager => include_str!("../../prompts/workflow_manager.txt"),
            TemplateName::EndDetection => include_str!("../../prompts/end_detection.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TemplateName::Agent => "agent",
            TemplateName::Client => "client",
            TemplateName::WorkflowManager => "workflow_manager",
            TemplateName::EndDetection => "end_detection",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

/// A prompt body with `{slot}` markers. Slot names are lowercase identifiers;
/// any other brace is literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    body: String,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(name: TemplateName, body: impl Into<String>) -> Self {
        let body = body.into();
        let segments = parse_segments(&body);
        PromptTemplate {
            name,
            body,
            segments,
        }
    }

    pub fn builtin(name: TemplateName) -> Self {
        PromptTemplate::new(name, name.builtin_body())
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(name) => Some(name.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Single-pass substitution: slot values are inserted verbatim and never
    /// rescanned for markers.
    pub fn render(&self, slots: &HashMap<&str, String>) -> Result<String, GatewayError> {
        let mut out = String::with_capacity(self.body.len());
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Slot(name) => {
                    let value = slots
                        .get(name.as_str())
                        .ok_or_else(|| GatewayError::MissingSlot(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`PromptTemplate::render`].
pub fn render_prompt(
    template: &PromptTemplate,
    slots: &HashMap<&str, String>,
) -> Result<String, GatewayError> {
    template.render(slots)
}

fn parse_segments(body: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .map(|close| &after[..close])
            .filter(|name| is_slot_name(name));
        match slot {
            Some(name) => {
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(name.to_string()));
                rest = &after[name.len() + 1..];
            }
            None => {
                literal.push('{');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

fn is_slot_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// The four prompt templates used by a run.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub agent: PromptTemplate,
    pub client: PromptTemplate,
    pub workflow_manager: PromptTemplate,
    pub end_detection: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            agent: PromptTemplate::builtin(TemplateName::Agent),
            client: PromptTemplate::builtin(TemplateName::Client),
            workflow_manager: PromptTemplate::builtin(TemplateName::WorkflowManager),
            end_detection: PromptTemplate::builtin(TemplateName::EndDetection),
        }
    }
}

impl PromptSet {
    /// Load overrides from a `prompts/` directory. Missing files fall back to
    /// the built-in bodies; one trailing newline is dropped from each file.
    pub fn load_dir(dir: &Path) -> Result<Self, GatewayError> {
        let load = |name: TemplateName| -> Result<PromptTemplate, GatewayError> {
            let path = dir.join(name.file_name());
            match std::fs::read_to_string(&path) {
                Ok(body) => {
                    let body = body
                        .strip_suffix("\r\n")
                        .or_else(|| body.strip_suffix('\n'))
                        .unwrap_or(&body);
                    Ok(PromptTemplate::new(name, body))
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    Ok(PromptTemplate::builtin(name))
                }
                Err(e) => Err(GatewayError::Template(format!("{}: {e}", path.display()))),
            }
        };
        Ok(PromptSet {
            agent: load(TemplateName::Agent)?,
            client: load(TemplateName::Client)?,
            workflow_manager: load(TemplateName::WorkflowManager)?,
            end_detection: load(TemplateName::EndDetection)?,
        })
    }

    pub fn get(&self, name: TemplateName) -> &PromptTemplate {
        match name {
            TemplateName::Agent => &self.agent,
            TemplateName::Client => &self.client,
            TemplateName::WorkflowManager => &self.workflow_manager,
            TemplateName::EndDetection => &self.end_detection,
        }
    }
}

impl FromStr for TemplateName {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateName::ALL
            .into_iter()
            .find(|n| n.to_string() == s)
            .ok_or_else(|| GatewayError::Template(format!("unknown template `{s}`")))
    }
}
