//! Automated dialogue scoring: subgoal tracking, success, character
//! consistency and threshold calibration.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::Url;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::http::{post_json, Limiter, WireError};
use crate::simulation::{Dialogue, Speaker};
use crate::textmetrics::{diversity_counts, rouge_l, tokenize};
use crate::workflow::{NodeId, WorkflowGraph};

/// ROUGE-L F1 a line must reach to count as a workflow step.
pub const DEFAULT_TAU: f64 = 0.33;

/// Maximum concurrent scorer calls per dialogue.
pub const DEFAULT_SCORER_FANOUT: usize = 8;

/// Threshold above which a consistency score counts as in character.
pub const CONSISTENCY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("scorer unreachable: {0}")]
    ScorerUnreachable(String),
    #[error("scorer returned {0}, outside [0, 1]")]
    OutOfRangeScore(f64),
    #[error("malformed scorer response: {0}")]
    MalformedScore(String),
    #[error("no {0} utterances to score")]
    NoUtterances(Side),
    #[error("calibration needs both positive and negative pairs")]
    DegenerateLabels,
    #[error("workflow `{0}` not found")]
    UnknownWorkflow(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgoalTrace {
    pub matched_nodes: Vec<NodeId>,
    pub abs_depth: usize,
    pub rel_depth: f64,
    pub success: bool,
}

/// Follow the agent's lines through the graph, in order.
///
/// Before the first match the only candidate is the root; afterwards the
/// candidates are the targets of the current node's outgoing edges. A line
/// advances the cursor to its best candidate when the F1 reaches `tau`
/// (ties go to the earlier candidate). A matched terminal ends the scan.
pub fn track_subgoals<S: AsRef<str>>(agent_lines: &[S], graph: &WorkflowGraph, tau: f64) -> SubgoalTrace {
    let mut matched: Vec<NodeId> = Vec::new();
    for line in agent_lines {
        let candidates: Vec<NodeId> = match matched.last() {
            None => vec![graph.root],
            Some(&cursor) => {
                let mut targets = Vec::new();
                for e in graph.outgoing(cursor) {
                    if !targets.contains(&e.to) {
                        targets.push(e.to);
                    }
                }
                targets
            }
        };
        let line = tokenize(line.as_ref());
        let mut best: Option<(NodeId, f64)> = None;
        for c in candidates {
            let f = crate::textmetrics::rouge_l_tokens(&line, &tokenize(&graph.node(c).text)).f1;
            if best.is_none_or(|(_, b)| f > b) {
                best = Some((c, f));
            }
        }
        match best {
            Some((node, f)) if f >= tau => {
                matched.push(node);
                if graph.is_terminal(node) {
                    break;
                }
            }
            Some(_) => {}
            None => break,
        }
    }
    let abs_depth = matched.len();
    let rel_depth = if graph.max_depth == 0 {
        0.0
    } else {
        abs_depth as f64 / graph.max_depth as f64
    };
    let success = matched.last().is_some_and(|n| graph.is_terminal(*n));
    SubgoalTrace {
        matched_nodes: matched,
        abs_depth,
        rel_depth,
        success,
    }
}

pub fn track_dialogue(d: &Dialogue, graph: &WorkflowGraph, tau: f64) -> SubgoalTrace {
    let lines: Vec<&str> = d.agent_utterances().map(|u| u.clean.as_str()).collect();
    track_subgoals(&lines, graph, tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Agent,
    Client,
    Both,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Agent => "agent",
            Side::Client => "client",
            Side::Both => "both",
        })
    }
}

/// Judges whether an utterance fits a character and persona.
pub trait Scorer: Send + Sync {
    fn score(&self, character: &str, persona: &str, utterance: &str) -> Result<f64, EvalError>;

    fn describe(&self) -> String;
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    character: &'a str,
    persona: &'a str,
    utterance: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Scorer behind a JSON POST endpoint: `{character, persona, utterance}` in,
/// `{score}` out.
pub struct HttpScorer {
    endpoint: Url,
    client: Client,
    retries: u32,
    limiter: Limiter,
}

impl HttpScorer {
    pub fn new(endpoint: &str, timeout: Duration, retries: u32) -> Result<Self, EvalError> {
        let endpoint = Url::parse(endpoint)
            .map_err(|e| EvalError::ScorerUnreachable(format!("bad endpoint {endpoint}: {e}")))?;
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EvalError::ScorerUnreachable(e.to_string()))?;
        Ok(HttpScorer {
            endpoint,
            client,
            retries,
            limiter: Limiter::new(DEFAULT_SCORER_FANOUT),
        })
    }

    pub fn preflight(&self) -> Result<(), EvalError> {
        crate::llm_gateway::http::check_reachable(&self.endpoint, Duration::from_secs(2))
            .map_err(|e| EvalError::ScorerUnreachable(e.to_string()))
    }
}

impl Scorer for HttpScorer {
    fn score(&self, character: &str, persona: &str, utterance: &str) -> Result<f64, EvalError> {
        let _permit = self.limiter.acquire();
        let body = ScoreRequest {
            character,
            persona,
            utterance,
        };
        let reply: ScoreResponse =
            post_json(&self.client, &self.endpoint, &body, self.retries).map_err(|e| match e {
                WireError::Unreachable(m) => EvalError::ScorerUnreachable(m),
                WireError::Timeout => EvalError::ScorerUnreachable(format!("{}: timed out", self.endpoint)),
                WireError::Malformed(m) => EvalError::MalformedScore(m),
            })?;
        Ok(reply.score)
    }

    fn describe(&self) -> String {
        self.endpoint.to_string()
    }
}

type ScoreFn = dyn Fn(&str, &str, &str) -> Result<f64, EvalError> + Send + Sync;

/// In-process scorer for tests and dry runs.
pub struct ScriptedScorer {
    f: Box<ScoreFn>,
}

impl ScriptedScorer {
    pub fn constant(score: f64) -> Self {
        Self::from_fn(move |_, _, _| Ok(score))
    }

    /// Replays `scores` in call order, cycling when exhausted.
    pub fn sequence(scores: Vec<f64>) -> Self {
        let next = Mutex::new(0usize);
        Self::from_fn(move |_, _, _| {
            let mut i = next.lock().expect("sequence lock");
            let s = scores[*i % scores.len()];
            *i += 1;
            Ok(s)
        })
    }

    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&str, &str, &str) -> Result<f64, EvalError> + Send + Sync + 'static,
    {
        ScriptedScorer { f: Box::new(f) }
    }
}

impl Scorer for ScriptedScorer {
    fn score(&self, character: &str, persona: &str, utterance: &str) -> Result<f64, EvalError> {
        (self.f)(character, persona, utterance)
    }

    fn describe(&self) -> String {
        "scripted".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Consistency {
    pub mean: f64,
    pub per_utterance: Vec<f64>,
}

/// Score every utterance of the chosen side and average. Calls fan out over
/// up to `fanout` threads; results keep transcript order.
pub fn score_consistency(
    scorer: &dyn Scorer,
    d: &Dialogue,
    side: Side,
    fanout: usize,
) -> Result<Consistency, EvalError> {
    let s = &d.scenario;
    let jobs: Vec<(&str, &str, &str)> = d
        .utterances
        .iter()
        .filter(|u| match side {
            Side::Agent => u.speaker == Speaker::Agent,
            Side::Client => u.speaker == Speaker::Client,
            Side::Both => true,
        })
        .map(|u| match u.speaker {
            Speaker::Agent => (s.agent_character.as_str(), s.agent_persona.as_str(), u.clean.as_str()),
            Speaker::Client => (s.client_character.as_str(), s.client_persona.as_str(), u.clean.as_str()),
        })
        .collect();
    if jobs.is_empty() {
        return Err(EvalError::NoUtterances(side));
    }
    let results: Vec<Mutex<Option<Result<f64, EvalError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..fanout.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(c, p, u)) = jobs.get(i) else { break };
                let r = scorer.score(c, p, u);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let mut per_utterance = Vec::with_capacity(jobs.len());
    for slot in results {
        let score = slot.into_inner().expect("result slot").expect("every job ran")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::OutOfRangeScore(score));
        }
        per_utterance.push(score);
    }
    let mean = per_utterance.iter().sum::<f64>() / per_utterance.len() as f64;
    Ok(Consistency { mean, per_utterance })
}

/// Per-dialogue metrics, also the line format of score files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueScore {
    pub dialogue_id: String,
    pub workflow_id: String,
    pub agent_character: String,
    pub matched_nodes: Vec<String>,
    pub abs_depth: usize,
    pub rel_depth: f64,
    pub success: bool,
    pub consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency_error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub utterance_consistency: Vec<f64>,
    pub ended: bool,
    pub unique_words: usize,
    pub unique_ngrams: usize,
    pub n_turns: usize,
    pub mean_utt_len: f64,
}

pub struct ScoreConfig<'a> {
    pub tau: f64,
    pub side: Side,
    pub scorer: Option<&'a dyn Scorer>,
    pub fanout: usize,
}

impl Default for ScoreConfig<'_> {
    fn default() -> Self {
        ScoreConfig {
            tau: DEFAULT_TAU,
            side: Side::Agent,
            scorer: None,
            fanout: DEFAULT_SCORER_FANOUT,
        }
    }
}

/// Assemble every metric for one dialogue. Consistency failures are recorded
/// in the score rather than returned; only a missing scorer leaves it empty
/// without a reason.
pub fn score_dialogue(d: &Dialogue, graph: &WorkflowGraph, cfg: &ScoreConfig<'_>) -> DialogueScore {
    let trace = track_dialogue(d, graph, cfg.tau);
    let clean: Vec<&str> = d.utterances.iter().map(|u| u.clean.as_str()).collect();
    let diversity = diversity_counts(&clean);
    let total_tokens: usize = clean.iter().map(|u| tokenize(u).len()).sum();
    let mean_utt_len = if clean.is_empty() {
        0.0
    } else {
        total_tokens as f64 / clean.len() as f64
    };
    let (consistency, consistency_error, utterance_consistency) = match cfg.scorer {
        None => (None, None, Vec::new()),
        Some(scorer) => match score_consistency(scorer, d, cfg.side, cfg.fanout) {
            Ok(c) => (Some(c.mean), None, c.per_utterance),
            Err(e) => (None, Some(e.to_string()), Vec::new()),
        },
    };
    DialogueScore {
        dialogue_id: d.id.clone(),
        workflow_id: graph.id.clone(),
        agent_character: d.scenario.agent_character.clone(),
        matched_nodes: trace
            .matched_nodes
            .iter()
            .map(|n| graph.node(*n).key.clone())
            .collect(),
        abs_depth: trace.abs_depth,
        rel_depth: trace.rel_depth,
        success: trace.success,
        consistency,
        consistency_error,
        utterance_consistency,
        ended: d.ended_naturally,
        unique_words: diversity.unique_words,
        unique_ngrams: diversity.unique_ngrams,
        n_turns: d.n_turns(),
        mean_utt_len,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub score: f64,
    pub positive: bool,
}

/// Pairs for one reference step: the matching utterance is positive, every
/// earlier utterance of the conversation is negative.
pub fn calibration_pairs<S: AsRef<str>>(reference: &str, positive: &str, earlier: &[S]) -> Vec<CalibrationPair> {
    std::iter::once(CalibrationPair {
        score: rouge_l(positive, reference).f1,
        positive: true,
    })
    .chain(earlier.iter().map(|u| CalibrationPair {
        score: rouge_l(u.as_ref(), reference).f1,
        positive: false,
    }))
    .collect()
}

/// A reference conversation with its workflow steps, as used for threshold
/// calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDialogue {
    #[serde(default)]
    pub id: Option<String>,
    pub steps: Vec<String>,
    pub utterances: Vec<String>,
}

/// For every step, the utterance with the highest ROUGE-L F1 is the positive
/// (first one on ties) and every utterance before it is a negative.
pub fn pairs_from_dialogue(d: &CalibrationDialogue) -> Vec<CalibrationPair> {
    let mut out = Vec::new();
    if d.utterances.is_empty() {
        return out;
    }
    for step in &d.steps {
        let mut best = 0;
        let mut best_f = f64::NEG_INFINITY;
        for (i, u) in d.utterances.iter().enumerate() {
            let f = rouge_l(u, step).f1;
            if f > best_f {
                best_f = f;
                best = i;
            }
        }
        out.extend(calibration_pairs(step, &d.utterances[best], &d.utterances[..best]));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdStats {
    pub tau: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub positives: usize,
}

impl ThresholdStats {
    pub fn precision(&self) -> f64 {
        let predicted = self.true_pos + self.false_pos;
        if predicted == 0 {
            0.0
        } else {
            self.true_pos as f64 / predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        self.true_pos as f64 / self.positives as f64
    }
}

/// Confusion counts for every observed score used as a threshold, ascending.
pub fn sweep_thresholds(pairs: &[CalibrationPair]) -> Vec<ThresholdStats> {
    let mut candidates: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let positives = pairs.iter().filter(|p| p.positive).count();
    candidates
        .into_iter()
        .map(|tau| {
            let (tp, fp) = pairs.iter().filter(|p| p.score >= tau).fold((0, 0), |(tp, fp), p| {
                if p.positive {
                    (tp + 1, fp)
                } else {
                    (tp, fp + 1)
                }
            });
            ThresholdStats {
                tau,
                true_pos: tp,
                false_pos: fp,
                positives,
            }
        })
        .collect()
}

/// The observed score that maximizes precision of `score >= tau`, preferring
/// higher recall and then the lower threshold.
pub fn calibrate_threshold(pairs: &[CalibrationPair]) -> Result<f64, EvalError> {
    let positives = pairs.iter().filter(|p| p.positive).count();
    if positives == 0 || positives == pairs.len() {
        return Err(EvalError::DegenerateLabels);
    }
    let sweep = sweep_thresholds(pairs);
    let mut best = sweep[0];
    for s in &sweep[1..] {
        // Exact precision comparison by cross-multiplication.
        let lhs = s.true_pos * (best.true_pos + best.false_pos);
        let rhs = best.true_pos * (s.true_pos + s.false_pos);
        if lhs > rhs || (lhs == rhs && s.true_pos > best.true_pos) {
            best = *s;
        }
    }
    Ok(best.tau)
}
