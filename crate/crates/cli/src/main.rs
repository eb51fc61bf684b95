use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use selftalk::annotation::Annotation;
use selftalk::evaluation::{
    calibrate_threshold, pairs_from_dialogue, sweep_thresholds, CalibrationDialogue, CalibrationPair, DialogueScore,
    DEFAULT_TAU,
};
use selftalk::filters::{apply_filter, FilterSpec};
use selftalk::pipeline::{
    aggregate, analyze_features, build_scorer, export_finetune_set, generate, load_prompts, load_workflows,
    meta_evaluate, read_jsonl, reference, run_loop, write_json_atomic, write_jsonl, Artifacts, RunConfig, RunManifest,
};
use selftalk::simulation::{Dialogue, DEFAULT_MAX_TURNS};

#[derive(Parser)]
#[command(name = "selftalk", version, about = "Bootstrap task-oriented dialogue data through self-talk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dialogues.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score generated dialogues.
    Score {
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        workflows: Option<PathBuf>,
        #[command(flatten)]
        scoring: ScoreArgs,
        /// Defaults to scores.jsonl next to the dialogues.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select dialogues by their scores.
    Filter {
        #[arg(long)]
        scores: PathBuf,
        /// none | random:P | abs-subgoals:K | frac-subgoals:P | has-ended
        #[arg(long, default_value = "none")]
        filter: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the kept dialogues taken from this store.
        #[arg(long)]
        dialogues: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Turn kept dialogues into fine-tuning records.
    Export {
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, score, filter and export in one pass.
    Loop {
        #[command(flatten)]
        gen: GenArgs,
        #[command(flatten)]
        scoring: ScoreArgs,
        #[arg(long, default_value = "none")]
        filter: String,
        #[arg(long, env = "SELFTALK_TRAINER_ENDPOINT")]
        trainer_endpoint: Option<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Choose the subgoal threshold that maximizes precision.
    Calibrate {
        /// Reference conversations: {"steps": [...], "utterances": [...]} per line.
        #[arg(long, conflicts_with = "pairs", required_unless_present = "pairs")]
        corpus: Option<PathBuf>,
        /// Precomputed {"score", "positive"} records.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Print the full threshold sweep.
        #[arg(long)]
        sweep: bool,
    },
    /// Relate run properties to an outcome (rank correlation and l1 regression).
    Stats {
        /// One manifest per observation.
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Comma-separated outcome per manifest, in the same order.
        #[arg(long, value_delimiter = ',', required = true)]
        outcome: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SetChoice::Kept)]
        set: SetChoice,
        /// Fixed regularization strength; chosen by cross-validation if absent.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Compare automated metrics with human annotations.
    MetaEval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        workflows: Option<PathBuf>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "SELFTALK_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SetChoice {
    Kept,
    Generated,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_TURNS)]
    max_turns: usize,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    workflows: Option<PathBuf>,
    #[arg(long)]
    characters: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// HTTP endpoint, or scripted[:cooperative|off-script|mixed[:P]].
    #[arg(long, env = "SELFTALK_AGENT_ENDPOINT", default_value = "scripted")]
    agent_endpoint: String,
    #[arg(long, env = "SELFTALK_CLIENT_ENDPOINT")]
    client_endpoint: Option<String>,
    #[arg(long, env = "SELFTALK_SELECTOR_ENDPOINT")]
    selector_endpoint: Option<String>,
    #[arg(long, env = "SELFTALK_END_DETECTOR_ENDPOINT")]
    end_detector_endpoint: Option<String>,
    /// Seconds per backend request.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// HTTP endpoint or scripted[:SCORE].
    #[arg(long, env = "SELFTALK_SCORER_ENDPOINT")]
    scorer_endpoint: Option<String>,
}

impl GenArgs {
    fn run_config(&self, out: &Path) -> RunConfig {
        let mut c = RunConfig::scripted(self.seed, self.n, out);
        c.run_id = self.run_id.clone();
        c.batch = self.batch;
        c.max_turns = self.max_turns;
        c.workflows_dir = self.workflows.clone();
        c.characters = self.characters.clone();
        c.prompts_dir = self.prompts.clone();
        c.agent_endpoint = self.agent_endpoint.clone();
        c.client_endpoint = self.client_endpoint.clone();
        c.selector_endpoint = self.selector_endpoint.clone();
        c.end_detector_endpoint = self.end_detector_endpoint.clone();
        c.timeout_secs = Some(self.timeout);
        c
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate { gen, out } => {
            let cfg = gen.run_config(&out);
            let dialogues = generate(&cfg)?;
            create_dir(&out)?;
            let path = out.join(Artifacts::DIALOGUES);
            let n = write_jsonl(&path, &dialogues)?;
            let aborted = dialogues.iter().filter(|d| d.abort_reason.is_some()).count();
            print_json(&serde_json::json!({ "dialogues": path, "generated": n, "aborted": aborted }))
        }
        Command::Score {
            dialogues,
            workflows,
            scoring,
            out,
        } => {
            let ds: Vec<Dialogue> = read_jsonl(&dialogues)?;
            let wf = load_workflows(workflows.as_deref())?;
            let scorer = scoring
                .scorer_endpoint
                .as_deref()
                .map(|s| build_scorer(s, Duration::from_secs(60)))
                .transpose()?;
            let scores = selftalk::pipeline::score_all(&ds, &wf, scoring.tau, scorer.as_deref())?;
            let out = out.unwrap_or_else(|| dialogues.with_file_name(Artifacts::SCORES));
            write_jsonl(&out, &scores)?;
            print_json(&serde_json::json!({ "scores": out, "aggregates": aggregate(&scores, &ds, 0) }))
        }
        Command::Filter {
            scores,
            filter,
            seed,
            dialogues,
            out,
        } => {
            let spec = FilterSpec::parse(&filter, seed)?;
            let s: Vec<DialogueScore> = read_jsonl(&scores)?;
            let report = apply_filter(&s, &spec)?;
            create_dir(&out)?;
            write_json_atomic(&out.join("filter_report.json"), &report)?;
            if let Some(path) = dialogues {
                let ds: Vec<Dialogue> = read_jsonl(&path)?;
                let keep: std::collections::HashSet<&str> = report.kept_ids.iter().map(String::as_str).collect();
                let kept: Vec<&Dialogue> = ds.iter().filter(|d| keep.contains(d.id.as_str())).collect();
                if kept.len() != report.kept {
                    bail!("{} kept ids but only {} found in {}", report.kept, kept.len(), path.display());
                }
                write_jsonl(&out.join(Artifacts::KEPT), kept)?;
            }
            print_json(&serde_json::json!({
                "filter": spec.to_string(),
                "total": report.total,
                "kept": report.kept,
                "filtered_fraction": report.filtered_fraction,
            }))
        }
        Command::Export { dialogues, prompts, out } => {
            let ds: Vec<Dialogue> = read_jsonl(&dialogues)?;
            let prompts = load_prompts(prompts.as_deref())?;
            let records = export_finetune_set(&ds, &prompts.agent)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let n = write_jsonl(&out, &records)?;
            print_json(&serde_json::json!({ "finetune": out, "records": n }))
        }
        Command::Loop {
            gen,
            scoring,
            filter,
            trainer_endpoint,
            out,
        } => {
            let mut cfg = gen.run_config(&out);
            cfg.tau = scoring.tau;
            cfg.scorer_endpoint = scoring.scorer_endpoint;
            cfg.filter = FilterSpec::parse(&filter, gen.seed)?;
            cfg.trainer_endpoint = trainer_endpoint;
            let m = run_loop(&cfg)?;
            print_json(&serde_json::json!({
                "run_id": m.run_id,
                "manifest": out.join(Artifacts::MANIFEST),
                "counts": m.counts,
                "aborted": m.aborted,
                "kept": m.aggregates.kept,
            }))
        }
        Command::Calibrate { corpus, pairs, sweep } => {
            let pairs: Vec<CalibrationPair> = match (corpus, pairs) {
                (Some(c), _) => read_jsonl::<CalibrationDialogue>(&c)?.iter().flat_map(pairs_from_dialogue).collect(),
                (None, Some(p)) => read_jsonl(&p)?,
                (None, None) => bail!("either --corpus or --pairs is required"),
            };
            let tau = calibrate_threshold(&pairs)?;
            let table = sweep_thresholds(&pairs);
            let chosen = table.iter().find(|s| s.tau == tau).expect("tau is a swept candidate");
            let mut out = serde_json::json!({
                "tau": tau,
                "precision": chosen.precision(),
                "recall": chosen.recall(),
                "pairs": pairs.len(),
                "positives": chosen.positives,
            });
            if sweep {
                out["sweep"] = table
                    .iter()
                    .map(|s| serde_json::json!({ "tau": s.tau, "precision": s.precision(), "recall": s.recall() }))
                    .collect();
            }
            print_json(&out)
        }
        Command::Stats {
            manifests,
            outcome,
            set,
            lambda,
        } => {
            if manifests.len() != outcome.len() {
                bail!("{} manifests but {} outcome values", manifests.len(), outcome.len());
            }
            let rows = manifests
                .iter()
                .map(|p| {
                    let m = RunManifest::load(p)?;
                    Ok(match set {
                        SetChoice::Kept => m.aggregates.kept.features(),
                        SetChoice::Generated => m.aggregates.generated.features(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            print_json(&analyze_features(&rows, &outcome, lambda)?)
        }
        Command::MetaEval {
            annotations,
            scores,
            workflows,
        } => {
            let a: Vec<Annotation> = read_jsonl(&annotations)?;
            let s: Vec<DialogueScore> = read_jsonl(&scores)?;
            let wf = load_workflows(workflows.as_deref())?;
            let report = meta_evaluate(&a, &s, &wf)?;
            print_json(&serde_json::json!({
                "report": report,
                "reference": {
                    "kendall_abs_depth": reference::KENDALL_ABS_DEPTH,
                    "pearson_rel_depth": reference::PEARSON_REL_DEPTH,
                    "consistency_accuracy": reference::CONSISTENCY_ACCURACY,
                    "consistency_f1": reference::CONSISTENCY_F1,
                    "annotator_kappa": reference::ANNOTATOR_KAPPA,
                },
            }))
        }
        Command::Serve { config, addr } => {
            let cfg = annotation_service::ServiceConfig::load(&config)?;
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(annotation_service::serve(cfg, addr))?;
            Ok(())
        }
    }
}
