//! Workflow documents and the directed graphs built from them.
//!
//! A workflow is the agent's scripted question tree. Questions become
//! [`NodeKind::Question`] nodes, every closing line becomes its own
//! [`NodeKind::Terminal`] node, and each reference client answer becomes an
//! edge. Terminal node keys follow the `<qid>.<answer number>` convention so
//! they line up with human subgoal marks.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("workflow has no questions")]
    EmptyWorkflow,
    #[error("duplicate question id `{0}`")]
    DuplicateQuestionId(String),
    #[error("question `{question}` points to unknown question `{target}`")]
    DanglingReference { question: String, target: String },
    #[error("question `{0}` has no answers")]
    NoAnswers(String),
    #[error("question `{0}` has an empty answer text")]
    EmptyAnswer(String),
    #[error("question `{question}` repeats answer `{answer}`")]
    DuplicateAnswer { question: String, answer: String },
    #[error("answer must carry exactly one of `next` or `terminal`")]
    AmbiguousOutcome,
    #[error("workflow graph has no terminal node")]
    NoTerminal,
    #[error("duplicate workflow id `{0}`")]
    DuplicateWorkflowId(String),
    #[error("invalid workflow document {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

/// A workflow as written on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowDoc {
    pub id: String,
    pub agent_character: String,
    pub topic: String,
    pub questions: Vec<QuestionSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub qid: String,
    pub text: String,
    pub answers: Vec<AnswerSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAnswer", into = "RawAnswer")]
pub struct AnswerSpec {
    pub text: String,
    pub outcome: Outcome,
}

/// Where a reference answer leads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Next(String),
    Terminal(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnswer {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terminal: Option<String>,
}

impl TryFrom<RawAnswer> for AnswerSpec {
    type Error = WorkflowError;

    fn try_from(raw: RawAnswer) -> Result<Self> {
        let outcome = match (raw.next, raw.terminal) {
            (Some(next), None) => Outcome::Next(next),
            (None, Some(terminal)) => Outcome::Terminal(terminal),
            _ => return Err(WorkflowError::AmbiguousOutcome),
        };
        Ok(AnswerSpec {
            text: raw.text,
            outcome,
        })
    }
}

impl From<AnswerSpec> for RawAnswer {
    fn from(answer: AnswerSpec) -> Self {
        let (next, terminal) = match answer.outcome {
            Outcome::Next(qid) => (Some(qid), None),
            Outcome::Terminal(text) => (None, Some(text)),
        };
        RawAnswer {
            text: answer.text,
            next,
            terminal,
        }
    }
}

impl WorkflowDoc {
    pub fn from_toml(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|source| WorkflowError::Parse {
            path: "<inline>".into(),
            source,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workflow documents always serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|source| WorkflowError::Io {
            path: path.display().to_string(),
            source,
        })?;
        toml::from_str(&src).map_err(|source| WorkflowError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Question,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    /// `Q3` for questions, `Q3.2` for the closing line of the second answer of `Q3`.
    pub key: String,
    pub kind: NodeKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: NodeId,
    pub answer: String,
    pub to: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowGraph {
    pub id: String,
    pub agent_character: String,
    pub topic: String,
    pub root: NodeId,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    /// Longest root-to-terminal path in nodes; 0 when no terminal exists.
    pub max_depth: usize,
}

/// Build the graph for a workflow document.
pub fn parse_workflow(doc: &WorkflowDoc) -> Result<WorkflowGraph> {
    if doc.questions.is_empty() {
        return Err(WorkflowError::EmptyWorkflow);
    }

    let mut question_ids = HashMap::new();
    for (idx, q) in doc.questions.iter().enumerate() {
        if question_ids.insert(q.qid.as_str(), NodeId(idx)).is_some() {
            return Err(WorkflowError::DuplicateQuestionId(q.qid.clone()));
        }
    }

    let mut nodes: Vec<Node> = doc
        .questions
        .iter()
        .enumerate()
        .map(|(idx, q)| Node {
            id: NodeId(idx),
            key: q.qid.clone(),
            kind: NodeKind::Question,
            text: q.text.clone(),
        })
        .collect();
    let mut edges = Vec::new();

    for (idx, q) in doc.questions.iter().enumerate() {
        if q.answers.is_empty() {
            return Err(WorkflowError::NoAnswers(q.qid.clone()));
        }
        let mut seen = HashSet::new();
        for (a_idx, answer) in q.answers.iter().enumerate() {
            if answer.text.trim().is_empty() {
                return Err(WorkflowError::EmptyAnswer(q.qid.clone()));
            }
            if !seen.insert(answer.text.as_str()) {
                return Err(WorkflowError::DuplicateAnswer {
                    question: q.qid.clone(),
                    answer: answer.text.clone(),
                });
            }
            let to = match &answer.outcome {
                Outcome::Next(target) => *question_ids.get(target.as_str()).ok_or_else(|| {
                    WorkflowError::DanglingReference {
                        question: q.qid.clone(),
                        target: target.clone(),
                    }
                })?,
                Outcome::Terminal(text) => {
                    let id = NodeId(nodes.len());
                    nodes.push(Node {
                        id,
                        key: format!("{}.{}", q.qid, a_idx + 1),
                        kind: NodeKind::Terminal,
                        text: text.clone(),
                    });
                    id
                }
            };
            edges.push(Edge {
                from: NodeId(idx),
                answer: answer.text.clone(),
                to,
            });
        }
    }

    let mut graph = WorkflowGraph {
        id: doc.id.clone(),
        agent_character: doc.agent_character.clone(),
        topic: doc.topic.clone(),
        root: NodeId(0),
        nodes,
        edges,
        max_depth: 0,
    };
    graph.max_depth = longest_path_depth(&graph).unwrap_or(0);
    Ok(graph)
}

impl WorkflowGraph {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn root_node(&self) -> &Node {
        self.node(self.root)
    }

    pub fn outgoing(&self, id: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.from == id)
    }

    pub fn is_terminal(&self, id: NodeId) -> bool {
        self.node(id).kind == NodeKind::Terminal
    }

    pub fn questions(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Question)
    }

    pub fn terminals(&self) -> impl Iterator<Item = &Node> + '_ {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Terminal)
    }

    pub fn node_by_key(&self, key: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.key == key)
    }

    /// One longest simple root-to-terminal path, as node ids. Ties go to
    /// the first answer in document order.
    pub fn longest_path(&self) -> Option<Vec<NodeId>> {
        let mut best: Option<Vec<NodeId>> = None;
        let mut path = vec![self.root];
        let mut on_path = vec![false; self.nodes.len()];
        on_path[self.root.0] = true;
        self.walk_paths(&mut path, &mut on_path, &mut |p| {
            if best.as_ref().is_none_or(|b| p.len() > b.len()) {
                best = Some(p.to_vec());
            }
        });
        best
    }

    fn walk_paths(
        &self,
        path: &mut Vec<NodeId>,
        on_path: &mut [bool],
        visit: &mut dyn FnMut(&[NodeId]),
    ) {
        let current = *path.last().expect("path starts at the root");
        if self.is_terminal(current) {
            visit(path);
            return;
        }
        for edge in self.outgoing(current) {
            if on_path[edge.to.0] {
                continue;
            }
            on_path[edge.to.0] = true;
            path.push(edge.to);
            self.walk_paths(path, on_path, visit);
            path.pop();
            on_path[edge.to.0] = false;
        }
    }

    /// Nodes reachable from the root.
    pub fn reachable(&self) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        seen[self.root.0] = true;
        while let Some(id) = stack.pop() {
            for edge in self.outgoing(id) {
                if !seen[edge.to.0] {
                    seen[edge.to.0] = true;
                    stack.push(edge.to);
                }
            }
        }
        seen
    }

    /// Numbered question list, used as the workflow summary in annotation tasks.
    pub fn summary(&self) -> Vec<String> {
        self.questions()
            .enumerate()
            .map(|(i, q)| format!("{}. {}", i + 1, q.text))
            .collect()
    }
}

/// Number of nodes on the longest simple root-to-terminal path, counting the
/// closing line. Each node is visited at most once per path, so loops between
/// questions do not inflate the count.
pub fn longest_path_depth(graph: &WorkflowGraph) -> Result<usize> {
    if graph.terminals().next().is_none() {
        return Err(WorkflowError::NoTerminal);
    }
    graph
        .longest_path()
        .map(|p| p.len())
        .ok_or(WorkflowError::NoTerminal)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    Unreachable { node: String },
    NoTerminalPath { question: String },
    EmptyText { node: String },
    QuestionLoop { question: String, target: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::Unreachable { node } => write!(f, "node {node} is unreachable from the root"),
            Finding::NoTerminalPath { question } => {
                write!(f, "question {question} has no terminal path")
            }
            Finding::EmptyText { node } => write!(f, "node {node} has empty text"),
            Finding::QuestionLoop { question, target } => {
                write!(f, "question {question} loops back to {target}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub findings: Vec<Finding>,
}

pub fn validate_graph(graph: &WorkflowGraph) -> ValidationReport {
    let mut findings = Vec::new();

    let reachable = graph.reachable();
    for node in &graph.nodes {
        if !reachable[node.id.0] {
            findings.push(Finding::Unreachable {
                node: node.key.clone(),
            });
        }
    }

    // Reverse reachability from terminals.
    let mut reaches_terminal = vec![false; graph.nodes.len()];
    let mut stack: Vec<NodeId> = graph.terminals().map(|n| n.id).collect();
    for id in &stack {
        reaches_terminal[id.0] = true;
    }
    while let Some(id) = stack.pop() {
        for edge in graph.edges.iter().filter(|e| e.to == id) {
            if !reaches_terminal[edge.from.0] {
                reaches_terminal[edge.from.0] = true;
                stack.push(edge.from);
            }
        }
    }
    for q in graph.questions() {
        if !reaches_terminal[q.id.0] {
            findings.push(Finding::NoTerminalPath {
                question: q.key.clone(),
            });
        }
    }

    for node in &graph.nodes {
        if node.text.trim().is_empty() {
            findings.push(Finding::EmptyText {
                node: node.key.clone(),
            });
        }
    }

    for (from, to) in back_edges(graph) {
        findings.push(Finding::QuestionLoop {
            question: graph.node(from).key.clone(),
            target: graph.node(to).key.clone(),
        });
    }

    ValidationReport {
        ok: findings.is_empty(),
        findings,
    }
}

/// Edges closing a cycle, found by iterative DFS from every question.
fn back_edges(graph: &WorkflowGraph) -> Vec<(NodeId, NodeId)> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let mut marks = vec![Mark::White; graph.nodes.len()];
    let mut found = Vec::new();
    for start in graph.questions().map(|n| n.id) {
        if marks[start.0] != Mark::White {
            continue;
        }
        let mut stack: Vec<(NodeId, Vec<NodeId>)> =
            vec![(start, graph.outgoing(start).map(|e| e.to).collect())];
        marks[start.0] = Mark::Grey;
        while let Some((node, children)) = stack.last_mut() {
            let node = *node;
            match children.pop() {
                Some(child) => match marks[child.0] {
                    Mark::White => {
                        marks[child.0] = Mark::Grey;
                        let next = graph.outgoing(child).map(|e| e.to).collect();
                        stack.push((child, next));
                    }
                    Mark::Grey => found.push((node, child)),
                    Mark::Black => {}
                },
                None => {
                    marks[node.0] = Mark::Black;
                    stack.pop();
                }
            }
        }
    }
    found.sort();
    found
}

/// A loaded collection of workflows keyed by id.
#[derive(Debug, Clone, Default)]
pub struct WorkflowSet {
    graphs: BTreeMap<String, Arc<WorkflowGraph>>,
}

const BUILTIN_WORKFLOWS: &[&str] = &[
    include_str!("../data/workflows/shop-keeper-buy-a-longsword.toml"),
    include_str!("../data/workflows/shop-keeper-buy-food-for-a-long-journey.toml"),
    include_str!("../data/workflows/shop-keeper-sell-a-valuable-item.toml"),
    include_str!("../data/workflows/doctor-ask-how-to-treat-a-headache.toml"),
    include_str!("../data/workflows/doctor-ask-for-a-remedy-for-a-fever.toml"),
    include_str!("../data/workflows/doctor-ask-how-to-treat-an-animal-bite.toml"),
    include_str!("../data/workflows/witch-give-them-a-love-potion.toml"),
    include_str!("../data/workflows/witch-curse-their-enemy.toml"),
    include_str!("../data/workflows/witch-give-them-a-magic-wand.toml"),
    include_str!("../data/workflows/tavern-owner-order-a-drink.toml"),
    include_str!("../data/workflows/tavern-owner-order-a-rich-meal.toml"),
    include_str!("../data/workflows/tavern-owner-book-a-bed-for-the-night.toml"),
    include_str!("../data/workflows/genie-become-rich.toml"),
    include_str!("../data/workflows/genie-make-the-prince-fall-in-love.toml"),
    include_str!("../data/workflows/genie-become-a-ruler.toml"),
];

impl WorkflowSet {
    /// The fifteen shipped workflows (five agent characters, three topics each).
    pub fn builtin() -> Self {
        let mut set = WorkflowSet::default();
        for src in BUILTIN_WORKFLOWS {
            let doc = WorkflowDoc::from_toml(src).expect("builtin workflow parses");
            let graph = parse_workflow(&doc).expect("builtin workflow is valid");
            set.insert(graph).expect("builtin workflow ids are unique");
        }
        set
    }

    /// Load every `*.toml` file in a directory, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let io_err = |source| WorkflowError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io_err)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
            .collect();
        paths.sort();
        let mut set = WorkflowSet::default();
        for path in paths {
            let graph = parse_workflow(&WorkflowDoc::load(&path)?)?;
            let report = validate_graph(&graph);
            for finding in &report.findings {
                log::warn!("{}: {finding}", path.display());
            }
            set.insert(graph)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, graph: WorkflowGraph) -> Result<()> {
        if self.graphs.contains_key(&graph.id) {
            return Err(WorkflowError::DuplicateWorkflowId(graph.id));
        }
        self.graphs.insert(graph.id.clone(), Arc::new(graph));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Arc<WorkflowGraph>> {
        self.graphs.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<WorkflowGraph>> + '_ {
        self.graphs.values()
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Keep only workflows for one agent character.
    pub fn for_agent(&self, agent_character: &str) -> Self {
        WorkflowSet {
            graphs: self
                .graphs
                .iter()
                .filter(|(_, g)| g.agent_character == agent_character)
                .map(|(k, g)| (k.clone(), Arc::clone(g)))
                .collect(),
        }
    }
}
