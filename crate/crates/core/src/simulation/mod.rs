//! The self-talk engine: agent and client take turns under a workflow graph.
//!
//! Each turn the agent is told which workflow line to say, the client answers,
//! a selector model maps the answer onto one of the outgoing edges (or "None of
//! the above"), and an end check looks at the last two utterances.

mod postprocess;
pub mod scripted;

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::{
    complete, Backend, Backends, GatewayError, GenerationRequest, PromptSet, PromptTemplate,
    SamplingParams,
};
use crate::workflow::{NodeId, NodeKind, WorkflowGraph};

pub use postprocess::{postprocess, Cleaner};

pub const DEFAULT_MAX_TURNS: usize = 8;

/// Turn prompt used when the selector found no matching answer.
pub const FREE_REPLY: &str = "any natural reply";

pub const END_KEYPHRASES: [&str; 3] = ["good luck", "goodbye", "you're welcome"];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimulationError {
    #[error("utterance is empty after postprocessing")]
    EmptyAfterClean,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Character {
    pub name: String,
    pub persona: String,
}

/// One sampled conversation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub client: Character,
    pub agent: Character,
    pub intention: String,
    pub workflow: Arc<WorkflowGraph>,
}

impl Scenario {
    pub fn record(&self) -> ScenarioRecord {
        ScenarioRecord {
            client_character: self.client.name.clone(),
            client_persona: self.client.persona.clone(),
            client_intention: self.intention.clone(),
            agent_character: self.agent.name.clone(),
            agent_persona: self.agent.persona.clone(),
            workflow_id: self.workflow.id.clone(),
        }
    }
}

/// Serialized form of a [`Scenario`]; the workflow is referenced by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub client_character: String,
    pub client_persona: String,
    pub client_intention: String,
    pub agent_character: String,
    pub agent_persona: String,
    pub workflow_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Agent,
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub raw: String,
    pub clean: String,
    pub turn_index: usize,
    /// The turn prompt the agent was given; absent for client utterances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Keyphrase,
    Detector,
    /// The agent delivered a closing line but neither end check fired.
    WorkflowComplete,
    TurnCap,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Running,
    EndedDetected(EndSignal),
    WorkflowComplete,
    TurnCap,
    Aborted(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndSignal {
    NotEnded,
    Keyphrase,
    Detector,
}

impl EndSignal {
    pub fn is_end(self) -> bool {
        self != EndSignal::NotEnded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeChoice {
    Option(usize),
    NoneOfTheAbove,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    pub max_turns: usize,
    pub sampling: SamplingParams,
    pub prompts: PromptSet,
    /// Extra generation attempts when an utterance cleans to nothing.
    pub empty_retries: u32,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            max_turns: DEFAULT_MAX_TURNS,
            sampling: SamplingParams::default(),
            prompts: PromptSet::default(),
            empty_retries: 0,
        }
    }
}

/// Capitalized speaker label as used in dialogue histories ("Shop keeper").
pub fn speaker_label(name: &str) -> String {
    let mut chars = name.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// A persisted conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub run_id: String,
    pub id: String,
    pub scenario: ScenarioRecord,
    pub utterances: Vec<Utterance>,
    pub end_reason: EndReason,
    pub ended_naturally: bool,
    /// Keys of the workflow nodes the generation walked through, root first.
    pub node_walk: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
}

impl Dialogue {
    pub fn agent_utterances(&self) -> impl Iterator<Item = &Utterance> + '_ {
        self.utterances.iter().filter(|u| u.speaker == Speaker::Agent)
    }

    pub fn n_turns(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.turn_index + 1)
            .max()
            .unwrap_or(0)
    }

    /// "Label: text" lines joined by newlines.
    pub fn transcript(&self) -> String {
        let agent = speaker_label(&self.scenario.agent_character);
        let client = speaker_label(&self.scenario.client_character);
        render_history(&self.utterances, &agent, &client)
    }
}

pub fn render_history(utterances: &[Utterance], agent_label: &str, client_label: &str) -> String {
    utterances
        .iter()
        .map(|u| {
            let label = match u.speaker {
                Speaker::Agent => agent_label,
                Speaker::Client => client_label,
            };
            format!("{label}: {}", u.clean)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Render the agent prompt for the given history and turn directive.
pub fn render_agent_prompt(
    template: &PromptTemplate,
    agent: &Character,
    client_name: &str,
    history: &[Utterance],
    directive: &str,
) -> Result<String, GatewayError> {
    let agent_label = speaker_label(&agent.name);
    let client_label = speaker_label(client_name);
    let slots = HashMap::from([
        ("character", agent.name.clone()),
        ("first_person_persona", agent.persona.clone()),
        (
            "dialogue_history_slot",
            render_history(history, &agent_label, &client_label),
        ),
        ("turn_prompt_slot", directive.to_string()),
    ]);
    template.render(&slots)
}

pub fn render_client_prompt(
    template: &PromptTemplate,
    client: &Character,
    agent_name: &str,
    intention: &str,
    history: &[Utterance],
) -> Result<String, GatewayError> {
    let agent_label = speaker_label(agent_name);
    let client_label = speaker_label(&client.name);
    let mut history_text = render_history(history, &agent_label, &client_label);
    if !history_text.is_empty() {
        history_text.push('\n');
    }
    history_text.push_str(&client_label);
    history_text.push(':');
    let slots = HashMap::from([
        ("character", client.name.clone()),
        ("first_person_persona", client.persona.clone()),
        ("agent_character", agent_name.to_string()),
        ("intention", intention.to_string()),
        ("dialogue_history_slot", history_text),
    ]);
    template.render(&slots)
}

/// Numbered option list with a trailing "None of the above".
pub fn format_options<S: AsRef<str>>(options: &[S]) -> String {
    options
        .iter()
        .map(AsRef::as_ref)
        .chain(std::iter::once("None of the above"))
        .enumerate()
        .map(|(i, o)| format!("{}. {o}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Ask the selector which outgoing answer the client utterance is closest to.
pub fn select_edge<S: AsRef<str>>(
    selector: &dyn Backend,
    template: &PromptTemplate,
    sampling: &SamplingParams,
    client_utterance: &str,
    options: &[S],
) -> Result<EdgeChoice, GatewayError> {
    let slots = HashMap::from([
        ("client_utterance", client_utterance.to_string()),
        ("options", format_options(options)),
    ]);
    let req = GenerationRequest::new(template.render(&slots)?).with_sampling(sampling);
    let reply = complete(selector, &req)?;
    Ok(parse_choice(&reply, options.len()))
}

/// First run of ASCII digits, 1-based; anything else is "None of the above".
pub fn parse_choice(reply: &str, n_options: usize) -> EdgeChoice {
    let digits: String = reply
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(char::is_ascii_digit)
        .collect();
    match digits.parse::<usize>() {
        Ok(k) if (1..=n_options).contains(&k) => EdgeChoice::Option(k - 1),
        _ => EdgeChoice::NoneOfTheAbove,
    }
}

pub fn contains_keyphrase(text: &str) -> bool {
    let text = text.to_lowercase().replace('’', "'");
    END_KEYPHRASES.iter().any(|k| text.contains(k))
}

/// Keyphrase scan over both utterances, then the detector prompt.
pub fn detect_end(
    detector: &dyn Backend,
    template: &PromptTemplate,
    sampling: &SamplingParams,
    agent_line: Option<&str>,
    client_line: &str,
) -> EndSignal {
    if agent_line.is_some_and(contains_keyphrase) || contains_keyphrase(client_line) {
        return EndSignal::Keyphrase;
    }
    let slots = HashMap::from([
        ("agent_utterance", agent_line.unwrap_or_default().to_string()),
        ("client_utterance", client_line.to_string()),
    ]);
    let reply = template.render(&slots).and_then(|prompt| {
        complete(detector, &GenerationRequest::new(prompt).with_sampling(sampling))
    });
    match reply {
        Ok(text) => {
            let first = text
                .split(|c: char| !c.is_alphabetic())
                .find(|w| !w.is_empty())
                .unwrap_or_default();
            if first.eq_ignore_ascii_case("end") {
                EndSignal::Detector
            } else {
                EndSignal::NotEnded
            }
        }
        Err(e) => {
            log::warn!("end detection failed, treating as not ended: {e}");
            EndSignal::NotEnded
        }
    }
}

/// Mutable state of one conversation in progress.
#[derive(Debug, Clone)]
pub struct DialogueState {
    pub scenario: Scenario,
    pub history: Vec<Utterance>,
    pub current_node: NodeId,
    pub free_mode: bool,
    pub turns_elapsed: usize,
    pub status: Status,
    pub node_walk: Vec<NodeId>,
    agent_cleaner: Cleaner,
    client_cleaner: Cleaner,
}

impl DialogueState {
    pub fn new(scenario: Scenario) -> Self {
        let root = scenario.workflow.root;
        let agent_cleaner = Cleaner::new(&speaker_label(&scenario.agent.name), &speaker_label(&scenario.client.name));
        let client_cleaner = Cleaner::new(&speaker_label(&scenario.client.name), &speaker_label(&scenario.agent.name));
        DialogueState {
            scenario,
            history: Vec::new(),
            current_node: root,
            free_mode: false,
            turns_elapsed: 0,
            status: Status::Running,
            node_walk: vec![root],
            agent_cleaner,
            client_cleaner,
        }
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    fn generate(
        &self,
        backend: &dyn Backend,
        prompt: String,
        stop_name: &str,
        cleaner: &Cleaner,
        cfg: &SimulationConfig,
    ) -> Result<(String, String), SimulationError> {
        let req = GenerationRequest::new(prompt)
            .with_sampling(&cfg.sampling)
            .with_stop_names([stop_name]);
        let mut attempts = 0;
        loop {
            let raw = complete(backend, &req)?;
            match cleaner.clean(&raw) {
                Ok(clean) => return Ok((raw, clean)),
                Err(e) if attempts >= cfg.empty_retries => return Err(e),
                Err(_) => attempts += 1,
            }
        }
    }

    fn run_turn(&mut self, backends: &Backends, cfg: &SimulationConfig) -> Result<EndSignal, SimulationError> {
        let graph = Arc::clone(&self.scenario.workflow);
        let node = graph.node(self.current_node);
        let turn = self.turns_elapsed;
        let agent_label = speaker_label(&self.scenario.agent.name);
        let client_label = speaker_label(&self.scenario.client.name);

        let directive = if self.free_mode { FREE_REPLY.to_string() } else { node.text.clone() };
        let prompt = render_agent_prompt(
            &cfg.prompts.agent,
            &self.scenario.agent,
            &self.scenario.client.name,
            &self.history,
            &directive,
        )?;
        let (raw, clean) =
            self.generate(backends.agent.as_ref(), prompt, &client_label, &self.agent_cleaner, cfg)?;
        self.history.push(Utterance {
            speaker: Speaker::Agent,
            raw,
            clean,
            turn_index: turn,
            directive: Some(directive),
        });

        let prompt = render_client_prompt(
            &cfg.prompts.client,
            &self.scenario.client,
            &self.scenario.agent.name,
            &self.scenario.intention,
            &self.history,
        )?;
        let (raw, clean) =
            self.generate(backends.client.as_ref(), prompt, &agent_label, &self.client_cleaner, cfg)?;
        self.history.push(Utterance {
            speaker: Speaker::Client,
            raw,
            clean,
            turn_index: turn,
            directive: None,
        });

        if node.kind == NodeKind::Question {
            let edges: Vec<_> = graph.outgoing(node.id).collect();
            let answers: Vec<&str> = edges.iter().map(|e| e.answer.as_str()).collect();
            let client_line = &self.history[self.history.len() - 1].clean;
            match select_edge(
                backends.selector.as_ref(),
                &cfg.prompts.workflow_manager,
                &cfg.sampling,
                client_line,
                &answers,
            )? {
                EdgeChoice::Option(i) => {
                    self.current_node = edges[i].to;
                    self.node_walk.push(edges[i].to);
                    self.free_mode = false;
                }
                EdgeChoice::NoneOfTheAbove => self.free_mode = true,
            }
        }

        let n = self.history.len();
        Ok(detect_end(
            backends.end_detector.as_ref(),
            &cfg.prompts.end_detection,
            &cfg.sampling,
            Some(&self.history[n - 2].clean),
            &self.history[n - 1].clean,
        ))
    }
}

/// Run one full turn. A failed turn leaves no partial utterances behind.
pub fn step_dialogue(mut state: DialogueState, backends: &Backends, cfg: &SimulationConfig) -> DialogueState {
    if !state.is_running() {
        return state;
    }
    let spoken_terminal = state.scenario.workflow.is_terminal(state.current_node);
    let checkpoint = (state.history.len(), state.current_node, state.free_mode, state.node_walk.len());
    match state.run_turn(backends, cfg) {
        Ok(signal) => {
            state.turns_elapsed += 1;
            state.status = if signal.is_end() {
                Status::EndedDetected(signal)
            } else if spoken_terminal {
                Status::WorkflowComplete
            } else if state.turns_elapsed >= cfg.max_turns {
                Status::TurnCap
            } else {
                Status::Running
            };
        }
        Err(e) => {
            state.history.truncate(checkpoint.0);
            state.current_node = checkpoint.1;
            state.free_mode = checkpoint.2;
            state.node_walk.truncate(checkpoint.3);
            state.status = Status::Aborted(e.to_string());
        }
    }
    state
}

pub fn run_dialogue(
    run_id: &str,
    id: &str,
    scenario: Scenario,
    backends: &Backends,
    cfg: &SimulationConfig,
) -> Dialogue {
    let mut state = DialogueState::new(scenario);
    if cfg.max_turns == 0 {
        state.status = Status::TurnCap;
    }
    while state.is_running() {
        state = step_dialogue(state, backends, cfg);
    }
    let (end_reason, abort_reason) = match &state.status {
        Status::EndedDetected(EndSignal::Detector) => (EndReason::Detector, None),
        Status::EndedDetected(_) => (EndReason::Keyphrase, None),
        Status::WorkflowComplete => (EndReason::WorkflowComplete, None),
        Status::TurnCap | Status::Running => (EndReason::TurnCap, None),
        Status::Aborted(reason) => (EndReason::Abort, Some(reason.clone())),
    };
    let graph = &state.scenario.workflow;
    Dialogue {
        run_id: run_id.to_string(),
        id: id.to_string(),
        scenario: state.scenario.record(),
        node_walk: state.node_walk.iter().map(|n| graph.node(*n).key.clone()).collect(),
        utterances: state.history,
        ended_naturally: matches!(end_reason, EndReason::Keyphrase | EndReason::Detector),
        end_reason,
        abort_reason,
    }
}

/// Run scenarios with at most `batch_size` in flight, handing each finished
/// dialogue to `on_done` in completion order. Returns the number produced.
pub fn run_batch<I, F>(
    run_id: &str,
    scenarios: I,
    backends: &Backends,
    batch_size: usize,
    cfg: &SimulationConfig,
    mut on_done: F,
) -> usize
where
    I: IntoIterator<Item = (String, Scenario)>,
    I::IntoIter: Send,
    F: FnMut(Dialogue),
{
    let queue = Mutex::new(scenarios.into_iter());
    let (tx, rx) = mpsc::channel();
    let mut produced = 0;
    std::thread::scope(|s| {
        for _ in 0..batch_size.max(1) {
            let tx = tx.clone();
            let queue = &queue;
            s.spawn(move || loop {
                let next = queue.lock().expect("scenario queue").next();
                let Some((id, scenario)) = next else { break };
                let dialogue = run_dialogue(run_id, &id, scenario, backends, cfg);
                if tx.send(dialogue).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for dialogue in rx {
            produced += 1;
            on_done(dialogue);
        }
    });
    produced
}

/// Convenience wrapper collecting [`run_batch`] output.
pub fn run_batch_collect<I>(
    run_id: &str,
    scenarios: I,
    backends: &Backends,
    batch_size: usize,
    cfg: &SimulationConfig,
) -> Vec<Dialogue>
where
    I: IntoIterator<Item = (String, Scenario)>,
    I::IntoIter: Send,
{
    let mut out = Vec::new();
    run_batch(run_id, scenarios, backends, batch_size, cfg, |d| out.push(d));
    out
}
