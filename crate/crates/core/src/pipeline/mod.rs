//! Generate, score, filter and export in one pass, plus the offline analyses
//! that consume its artifacts.

mod analysis;
mod characters;
mod export;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use analysis::{
    aggregate, aggregate_by_character, analyze_features, meta_evaluate, reference, FeatureAnalysis,
    MetaEvalReport, MetricAggregates, FEATURE_NAMES,
};
pub use characters::{sample_scenario, CharacterSet};
pub use export::{export_dialogue, export_finetune_set, FinetunePair, FinetuneRecord};

use crate::evaluation::{
    score_dialogue, DialogueScore, EvalError, HttpScorer, ScoreConfig, Scorer, ScriptedScorer, Side, DEFAULT_TAU,
};
use crate::filters::{apply_filter, FilterError, FilterReport, FilterSpec};
use crate::llm_gateway::{Backend, Backends, GatewayError, HttpBackend, HttpConfig, PromptSet};
use crate::simulation::scripted::{ClientPolicy, ScriptedWorld};
use crate::simulation::{run_batch, Dialogue, SimulationConfig, DEFAULT_MAX_TURNS};
use crate::stats::StatsError;
use crate::workflow::{WorkflowError, WorkflowSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("character set must have at least one agent and one client")]
    EmptyCharacterSet,
    #[error("no character defined for agent `{0}`")]
    UnknownAgent(String),
    #[error("workflow `{0}` not found")]
    UnknownWorkflow(String),
    #[error("kept set is empty")]
    EmptyKeptSet,
    #[error("need at least 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("annotations and scores share no dialogue id")]
    NoOverlap,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Json { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Write one JSON document per line.
pub fn write_jsonl<'a, T, I>(path: &Path, items: I) -> Result<usize>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| PipelineError::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| PipelineError::io(path, e))?;
    Ok(n)
}

/// Read a line-delimited store; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Write through a temporary sibling and rename into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Json {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    std::fs::write(&tmp, body + "\n").map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub const SCRIPTED: &str = "scripted";

/// Where generation requests go: an HTTP endpoint per role, or the
/// deterministic scripted world (`scripted[:policy]`).
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Scripted(ClientPolicy),
    Http {
        agent: String,
        client: String,
        selector: String,
        end_detector: String,
    },
}

impl BackendSpec {
    /// Selector and end detector fall back to the agent endpoint.
    pub fn resolve(
        agent: &str,
        client: Option<&str>,
        selector: Option<&str>,
        end_detector: Option<&str>,
    ) -> Result<Self> {
        if let Some(rest) = agent.strip_prefix(SCRIPTED) {
            let policy = match rest.strip_prefix(':') {
                Some(p) => p.parse().map_err(|e| PipelineError::Config(format!("{e}")))?,
                None if rest.is_empty() => ClientPolicy::Cooperative,
                None => return Err(PipelineError::Config(format!("unknown backend `{agent}`"))),
            };
            for other in [client, selector, end_detector].into_iter().flatten() {
                if !other.starts_with(SCRIPTED) {
                    return Err(PipelineError::Config(
                        "scripted agent cannot be mixed with HTTP backends".into(),
                    ));
                }
            }
            return Ok(BackendSpec::Scripted(policy));
        }
        let client = client.ok_or_else(|| PipelineError::Config("client endpoint is required".into()))?;
        Ok(BackendSpec::Http {
            agent: agent.to_string(),
            client: client.to_string(),
            selector: selector.unwrap_or(agent).to_string(),
            end_detector: end_detector.unwrap_or(agent).to_string(),
        })
    }

    /// Build backends, checking that every HTTP endpoint accepts connections.
    pub fn build(&self, workflows: &WorkflowSet, seed: u64, http: &HttpConfig) -> Result<Backends> {
        match self {
            BackendSpec::Scripted(policy) => Ok(ScriptedWorld::new(workflows, *policy, seed).backends()),
            BackendSpec::Http {
                agent,
                client,
                selector,
                end_detector,
            } => {
                let mut cache: BTreeMap<&str, Arc<dyn Backend>> = BTreeMap::new();
                for url in [agent, client, selector, end_detector] {
                    if cache.contains_key(url.as_str()) {
                        continue;
                    }
                    let b = HttpBackend::new(url, http.clone())
                        .map_err(|e| PipelineError::Config(e.to_string()))?;
                    b.preflight().map_err(|e| PipelineError::Config(e.to_string()))?;
                    cache.insert(url, Arc::new(b));
                }
                Ok(Backends::new(Arc::clone(&cache[agent.as_str()]), Arc::clone(&cache[client.as_str()]))
                    .with_selector(Arc::clone(&cache[selector.as_str()]))
                    .with_end_detector(Arc::clone(&cache[end_detector.as_str()])))
            }
        }
    }
}

/// Character-consistency scorer: `scripted[:CONST]` or an HTTP endpoint.
pub fn build_scorer(spec: &str, timeout: Duration) -> Result<Box<dyn Scorer>> {
    if let Some(rest) = spec.strip_prefix(SCRIPTED) {
        let value = match rest.strip_prefix(':') {
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| PipelineError::Config(format!("bad scripted score `{v}`")))?,
            None if rest.is_empty() => 1.0,
            None => return Err(PipelineError::Config(format!("unknown scorer `{spec}`"))),
        };
        return Ok(Box::new(ScriptedScorer::constant(value)));
    }
    let s = HttpScorer::new(spec, timeout, 2).map_err(|e| PipelineError::Config(e.to_string()))?;
    s.preflight().map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(Box::new(s))
}

pub fn load_workflows(dir: Option<&Path>) -> Result<WorkflowSet> {
    match dir {
        Some(d) => {
            let set = WorkflowSet::load_dir(d)?;
            if set.is_empty() {
                return Err(PipelineError::Config(format!("no workflows in {}", d.display())));
            }
            Ok(set)
        }
        None => Ok(WorkflowSet::builtin()),
    }
}

pub fn load_characters(path: Option<&Path>) -> Result<CharacterSet> {
    path.map_or_else(|| Ok(CharacterSet::builtin()), CharacterSet::load)
}

pub fn load_prompts(dir: Option<&Path>) -> Result<PromptSet> {
    Ok(dir.map_or_else(|| Ok(PromptSet::default()), PromptSet::load_dir)?)
}

fn default_batch() -> usize {
    8
}
fn default_max_turns() -> usize {
    DEFAULT_MAX_TURNS
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_endpoint() -> String {
    SCRIPTED.to_string()
}

/// Everything a run needs; stored verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub run_id: Option<String>,
    pub seed: u64,
    pub n: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub filter: FilterSpec,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub workflows_dir: Option<PathBuf>,
    #[serde(default)]
    pub characters: Option<PathBuf>,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    #[serde(default = "default_endpoint")]
    pub agent_endpoint: String,
    #[serde(default)]
    pub client_endpoint: Option<String>,
    #[serde(default)]
    pub selector_endpoint: Option<String>,
    #[serde(default)]
    pub end_detector_endpoint: Option<String>,
    #[serde(default)]
    pub scorer_endpoint: Option<String>,
    #[serde(default)]
    pub trainer_endpoint: Option<String>,
    /// Seconds per backend request.
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl RunConfig {
    pub fn scripted(seed: u64, n: usize, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            run_id: None,
            seed,
            n,
            batch: default_batch(),
            max_turns: DEFAULT_MAX_TURNS,
            tau: DEFAULT_TAU,
            filter: FilterSpec::None,
            out_dir: out_dir.into(),
            workflows_dir: None,
            characters: None,
            prompts_dir: None,
            agent_endpoint: default_endpoint(),
            client_endpoint: None,
            selector_endpoint: None,
            end_detector_endpoint: None,
            scorer_endpoint: None,
            trainer_endpoint: None,
            timeout_secs: None,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| format!("run-{}", self.seed))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs.unwrap_or(60))
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        BackendSpec::resolve(
            &self.agent_endpoint,
            self.client_endpoint.as_deref(),
            self.selector_endpoint.as_deref(),
            self.end_detector_endpoint.as_deref(),
        )
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(PipelineError::Config("n must be positive".into()));
        }
        if self.batch == 0 {
            return Err(PipelineError::Config("batch must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(PipelineError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub generated: usize,
    pub scored: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub dialogues: PathBuf,
    pub scores: PathBuf,
    pub kept: PathBuf,
    pub finetune: PathBuf,
}

impl Artifacts {
    pub const DIALOGUES: &'static str = "dialogues.jsonl";
    pub const SCORES: &'static str = "scores.jsonl";
    pub const KEPT: &'static str = "kept.jsonl";
    pub const FINETUNE: &'static str = "finetune.jsonl";
    pub const MANIFEST: &'static str = "manifest.json";

    fn in_dir(dir: &Path) -> Self {
        Artifacts {
            dialogues: dir.join(Self::DIALOGUES),
            scores: dir.join(Self::SCORES),
            kept: dir.join(Self::KEPT),
            finetune: dir.join(Self::FINETUNE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregates {
    pub generated: MetricAggregates,
    pub kept: MetricAggregates,
    pub kept_by_character: BTreeMap<String, MetricAggregates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerOutcome {
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
    pub counts: RunCounts,
    pub filter: FilterSpec,
    pub filter_report: FilterReport,
    pub aggregates: RunAggregates,
    pub aborted: usize,
    pub artifacts: Artifacts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerOutcome>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        serde_json::from_str(&src).map_err(|e| PipelineError::Json {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Sample `n` scenarios under `seed` with ids `{run_id}-{i:05}`.
pub fn sample_scenarios(
    run_id: &str,
    n: usize,
    seed: u64,
    chars: &CharacterSet,
    workflows: &WorkflowSet,
) -> Result<Vec<(String, crate::simulation::Scenario)>> {
    let pool: Vec<_> = workflows.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Ok((format!("{run_id}-{i:05}"), sample_scenario(&mut rng, chars, &pool)?)))
        .collect()
}

/// Score dialogues against their workflows; output follows input order.
pub fn score_all(
    dialogues: &[Dialogue],
    workflows: &WorkflowSet,
    tau: f64,
    scorer: Option<&dyn Scorer>,
) -> Result<Vec<DialogueScore>> {
    let cfg = ScoreConfig {
        tau,
        side: Side::Agent,
        scorer,
        ..ScoreConfig::default()
    };
    dialogues
        .iter()
        .map(|d| {
            let g = workflows
                .get(&d.scenario.workflow_id)
                .ok_or_else(|| PipelineError::UnknownWorkflow(d.scenario.workflow_id.clone()))?;
            Ok(score_dialogue(d, g, &cfg))
        })
        .collect()
}

/// POST the export to a trainer and keep its reply as-is.
pub fn post_to_trainer(endpoint: &str, run_id: &str, records: &[FinetuneRecord], timeout: Duration) -> TrainerOutcome {
    #[derive(Serialize)]
    struct Body<'a> {
        run_id: &'a str,
        records: &'a [FinetuneRecord],
    }
    let result = reqwest::Url::parse(endpoint)
        .map_err(|e| e.to_string())
        .and_then(|url| {
            let client = reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .map_err(|e| e.to_string())?;
            crate::llm_gateway::http::post_json::<_, serde_json::Value>(&client, &url, &Body { run_id, records }, 2)
                .map_err(|e| format!("{e:?}"))
        });
    match result {
        Ok(v) => TrainerOutcome {
            endpoint: endpoint.to_string(),
            response: Some(v),
            error: None,
        },
        Err(e) => {
            log::warn!("trainer call failed: {e}");
            TrainerOutcome {
                endpoint: endpoint.to_string(),
                response: None,
                error: Some(e),
            }
        }
    }
}

struct Prepared {
    workflows: WorkflowSet,
    backends: Backends,
    scorer: Option<Box<dyn Scorer>>,
    scenarios: Vec<(String, crate::simulation::Scenario)>,
    sim: SimulationConfig,
}

fn prepare(config: &RunConfig, with_scorer: bool) -> Result<Prepared> {
    config.check()?;
    let workflows = load_workflows(config.workflows_dir.as_deref())?;
    let chars = load_characters(config.characters.as_deref())?;
    let prompts = load_prompts(config.prompts_dir.as_deref())?;
    let http = HttpConfig {
        timeout: config.timeout(),
        ..HttpConfig::default()
    };
    let backends = config.backend_spec()?.build(&workflows, config.seed, &http)?;
    let scorer = match (&config.scorer_endpoint, with_scorer) {
        (Some(s), true) => Some(build_scorer(s, config.timeout())?),
        _ => None,
    };
    let scenarios = sample_scenarios(&config.run_id(), config.n, config.seed, &chars, &workflows)?;
    let sim = SimulationConfig {
        max_turns: config.max_turns,
        prompts,
        ..SimulationConfig::default()
    };
    Ok(Prepared {
        workflows,
        backends,
        scorer,
        scenarios,
        sim,
    })
}

/// Generate the run's dialogues only, sorted by id.
pub fn generate(config: &RunConfig) -> Result<Vec<Dialogue>> {
    let p = prepare(config, false)?;
    let mut out = crate::simulation::run_batch_collect(&config.run_id(), p.scenarios, &p.backends, config.batch, &p.sim);
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// One generate, score, filter and export pass. Configuration problems fail
/// before any generation; per-dialogue failures are recorded in the stores.
pub fn run_loop(config: &RunConfig) -> Result<RunManifest> {
    let Prepared {
        workflows,
        backends,
        scorer,
        scenarios,
        sim,
    } = prepare(config, true)?;
    std::fs::create_dir_all(&config.out_dir).map_err(|e| PipelineError::io(&config.out_dir, e))?;
    let run_id = config.run_id();
    let score_cfg = ScoreConfig {
        tau: config.tau,
        side: Side::Agent,
        scorer: scorer.as_deref(),
        ..ScoreConfig::default()
    };

    // Scoring runs on this thread while workers keep generating.
    let mut scored: Vec<(Dialogue, DialogueScore)> = Vec::with_capacity(config.n);
    run_batch(&run_id, scenarios, &backends, config.batch, &sim, |d| {
        let g = workflows
            .get(&d.scenario.workflow_id)
            .expect("scenarios are sampled from the loaded workflows");
        let s = score_dialogue(&d, g, &score_cfg);
        scored.push((d, s));
    });
    scored.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let (dialogues, scores): (Vec<Dialogue>, Vec<DialogueScore>) = scored.into_iter().unzip();
    let aborted = dialogues.iter().filter(|d| d.abort_reason.is_some()).count();

    let report = apply_filter(&scores, &config.filter)?;
    let keep: std::collections::HashSet<&str> = report.kept_ids.iter().map(String::as_str).collect();
    let kept_dialogues: Vec<Dialogue> = dialogues.iter().filter(|d| keep.contains(d.id.as_str())).cloned().collect();
    let kept_scores: Vec<DialogueScore> = scores.iter().filter(|s| keep.contains(s.dialogue_id.as_str())).cloned().collect();
    let records = match export_finetune_set(&kept_dialogues, &sim.prompts.agent) {
        Ok(r) => r,
        Err(PipelineError::EmptyKeptSet) => Vec::new(),
        Err(e) => return Err(e),
    };

    let artifacts = Artifacts::in_dir(&config.out_dir);
    let generated = write_jsonl(&artifacts.dialogues, &dialogues)?;
    let n_scored = write_jsonl(&artifacts.scores, &scores)?;
    let kept = write_jsonl(&artifacts.kept, &kept_dialogues)?;
    write_jsonl(&artifacts.finetune, &records)?;

    let trainer = match (&config.trainer_endpoint, records.is_empty()) {
        (Some(url), false) => Some(post_to_trainer(url, &run_id, &records, config.timeout())),
        (Some(url), true) => Some(TrainerOutcome {
            endpoint: url.clone(),
            response: None,
            error: Some("kept set is empty; nothing sent".into()),
        }),
        (None, _) => None,
    };

    let manifest = RunManifest {
        run_id,
        seed: config.seed,
        config: config.clone(),
        counts: RunCounts {
            generated,
            scored: n_scored,
            kept,
        },
        filter: config.filter,
        filter_report: report,
        aggregates: RunAggregates {
            generated: aggregate(&scores, &dialogues, config.seed),
            kept: aggregate(&kept_scores, &kept_dialogues, config.seed),
            kept_by_character: aggregate_by_character(&kept_scores, &kept_dialogues, config.seed),
        },
        aborted,
        artifacts,
        trainer,
    };
    write_json_atomic(&config.out_dir.join(Artifacts::MANIFEST), &manifest)?;
    Ok(manifest)
}
