use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotation::{agreement, AgreementReport, Annotation, AnnotationError};
use crate::evaluation::{DialogueScore, CONSISTENCY_THRESHOLD};
use crate::simulation::Dialogue;
use crate::stats::{
    classification_metrics, kendall_tau_b, lasso_cv, lasso_fit, pearson, spearman, ClassificationMetrics,
    RegressionFit,
};
use crate::textmetrics::{pairwise_diversity, DEFAULT_MAX_PAIRS};
use crate::workflow::WorkflowSet;

/// Mean metrics over a set of scored dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregates {
    pub dialogues: usize,
    /// Mean over dialogues with a consistency score.
    pub char_consistency: Option<f64>,
    pub abs_depth: f64,
    pub rel_depth: f64,
    pub success: f64,
    pub ended: f64,
    pub unique_words: f64,
    pub unique_ngrams: f64,
    /// Mean over agent characters of one minus mean pairwise ROUGE-L F1.
    pub diversity: Option<f64>,
    pub n_turns: f64,
    pub mean_utt_len: f64,
}

pub const FEATURE_NAMES: [&str; 10] = [
    "abs_depth",
    "rel_depth",
    "success",
    "char_consistency",
    "ended",
    "unique_words",
    "unique_ngrams",
    "diversity",
    "n_turns",
    "mean_utt_len",
];

impl MetricAggregates {
    /// Values in [`FEATURE_NAMES`] order; absent metrics become 0.
    pub fn features(&self) -> [f64; 10] {
        [
            self.abs_depth,
            self.rel_depth,
            self.success,
            self.char_consistency.unwrap_or(0.0),
            self.ended,
            self.unique_words,
            self.unique_ngrams,
            self.diversity.unwrap_or(0.0),
            self.n_turns,
            self.mean_utt_len,
        ]
    }
}

/// Aggregate `scores`; diversity uses the matching transcripts in `dialogues`.
pub fn aggregate(scores: &[DialogueScore], dialogues: &[Dialogue], seed: u64) -> MetricAggregates {
    let n = scores.len();
    let mean = |f: &dyn Fn(&DialogueScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            scores.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let consistent: Vec<f64> = scores.iter().filter_map(|s| s.consistency).collect();
    let wanted: std::collections::HashSet<&str> = scores.iter().map(|s| s.dialogue_id.as_str()).collect();
    let mut by_character: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for d in dialogues.iter().filter(|d| wanted.contains(d.id.as_str())) {
        by_character
            .entry(d.scenario.agent_character.as_str())
            .or_default()
            .push(d.transcript());
    }
    let per_character: Vec<f64> = by_character
        .values()
        .filter_map(|t| pairwise_diversity(t, DEFAULT_MAX_PAIRS, seed).ok())
        .collect();
    MetricAggregates {
        dialogues: n,
        char_consistency: (!consistent.is_empty())
            .then(|| consistent.iter().sum::<f64>() / consistent.len() as f64),
        abs_depth: mean(&|s| s.abs_depth as f64),
        rel_depth: mean(&|s| s.rel_depth),
        success: mean(&|s| f64::from(u8::from(s.success))),
        ended: mean(&|s| f64::from(u8::from(s.ended))),
        unique_words: mean(&|s| s.unique_words as f64),
        unique_ngrams: mean(&|s| s.unique_ngrams as f64),
        diversity: (!per_character.is_empty())
            .then(|| per_character.iter().sum::<f64>() / per_character.len() as f64),
        n_turns: mean(&|s| s.n_turns as f64),
        mean_utt_len: mean(&|s| s.mean_utt_len),
    }
}

/// Aggregates for the whole set and for each agent character.
pub fn aggregate_by_character(
    scores: &[DialogueScore],
    dialogues: &[Dialogue],
    seed: u64,
) -> BTreeMap<String, MetricAggregates> {
    let mut groups: BTreeMap<String, Vec<DialogueScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(s.agent_character.clone()).or_default().push(s.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let agg = aggregate(&v, dialogues, seed);
            (k, agg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnalysis {
    pub features: Vec<String>,
    /// Spearman correlation with the outcome; absent for constant features.
    pub spearman: Vec<Option<f64>>,
    pub lasso: RegressionFit,
}

/// Rank correlations and an l1-regularized linear fit (standardized
/// features, no intercept) of `outcome` on per-set features. λ is chosen by
/// cross-validation when not given.
pub fn analyze_features(
    rows: &[[f64; 10]],
    outcome: &[f64],
    lambda: Option<f64>,
) -> Result<FeatureAnalysis, PipelineError> {
    if rows.len() != outcome.len() {
        return Err(PipelineError::Stats(crate::stats::StatsError::LengthMismatch(rows.len(), outcome.len())));
    }
    if rows.len() < 3 {
        return Err(PipelineError::TooFewObservations(rows.len()));
    }
    let spearman_values = (0..FEATURE_NAMES.len())
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            spearman(&col, outcome).ok()
        })
        .collect();
    let x = Array2::from_shape_fn((rows.len(), FEATURE_NAMES.len()), |(i, j)| rows[i][j]);
    let y = Array1::from(outcome.to_vec());
    let lasso = match lambda {
        Some(l) => lasso_fit(&x, &y, l, true)?,
        None => lasso_cv(&x, &y, 5.min(rows.len()), true)?.fit,
    };
    Ok(FeatureAnalysis {
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        spearman: spearman_values,
        lasso,
    })
}

/// Agreement statistics reported for the original human study, kept for
/// side-by-side comparison with [`MetaEvalReport`].
pub mod reference {
    pub const KENDALL_ABS_DEPTH: f64 = 0.67;
    pub const PEARSON_REL_DEPTH: f64 = 0.67;
    pub const CONSISTENCY_ACCURACY: f64 = 0.87;
    pub const CONSISTENCY_F1: f64 = 0.93;
    pub const ANNOTATOR_KAPPA: f64 = 0.52;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalReport {
    pub joined: usize,
    pub kendall_abs_depth: Option<f64>,
    pub pearson_rel_depth: Option<f64>,
    pub consistency: Option<ClassificationMetrics>,
    pub consistency_items: usize,
    pub agreement: Option<AgreementReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Compare automated scores with human judgments.
///
/// Each scored dialogue is joined with the annotation of its smallest
/// annotator id. Human depth is the number of distinct non-zero subgoal
/// marks; human relative depth divides by the workflow's longest path.
/// Consistency predictions (`score >= 0.5`) are compared per agent utterance
/// with human values of 0 or 1; undecided values are skipped.
pub fn meta_evaluate(
    annotations: &[Annotation],
    scores: &[DialogueScore],
    workflows: &WorkflowSet,
) -> Result<MetaEvalReport, PipelineError> {
    let mut first: BTreeMap<&str, &Annotation> = BTreeMap::new();
    for a in annotations {
        first
            .entry(a.dialogue_id.as_str())
            .and_modify(|cur| {
                if a.annotator_id < cur.annotator_id {
                    *cur = a;
                }
            })
            .or_insert(a);
    }
    let mut notes = Vec::new();
    let (mut human_abs, mut auto_abs, mut human_rel, mut auto_rel) = (vec![], vec![], vec![], vec![]);
    let (mut pred, mut gold) = (vec![], vec![]);
    for s in scores {
        let Some(a) = first.get(s.dialogue_id.as_str()) else { continue };
        let max_depth = workflows
            .get(&s.workflow_id)
            .map(|g| g.max_depth)
            .ok_or_else(|| PipelineError::UnknownWorkflow(s.workflow_id.clone()))?;
        let h = a.abs_depth();
        human_abs.push(h as f64);
        auto_abs.push(s.abs_depth as f64);
        human_rel.push(if max_depth == 0 { 0.0 } else { h as f64 / max_depth as f64 });
        auto_rel.push(s.rel_depth);
        let human: BTreeMap<usize, f64> = a.per_utterance_character.iter().map(|j| (j.index, j.value)).collect();
        for (k, score) in s.utterance_consistency.iter().enumerate() {
            match human.get(&(2 * k)) {
                Some(&v) if v == 0.0 || v == 1.0 => {
                    pred.push(*score >= CONSISTENCY_THRESHOLD);
                    gold.push(v == 1.0);
                }
                _ => {}
            }
        }
    }
    match human_abs.len() {
        0 => return Err(PipelineError::NoOverlap),
        1 => return Err(PipelineError::TooFewObservations(1)),
        _ => {}
    }
    let mut keep = |r: Result<f64, crate::stats::StatsError>, what: &str| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    };
    let kendall_abs_depth = keep(kendall_tau_b(&human_abs, &auto_abs), "kendall abs_depth");
    let pearson_rel_depth = keep(pearson(&human_rel, &auto_rel), "pearson rel_depth");
    let consistency = if pred.is_empty() {
        notes.push("consistency: no per-utterance scores joined with decided human labels".into());
        None
    } else {
        Some(classification_metrics(&pred, &gold)?)
    };
    let agreement = match agreement(annotations) {
        Ok(r) => Some(r),
        Err(AnnotationError::NoDoubleAnnotations) => None,
        Err(e) => {
            notes.push(format!("agreement: {e}"));
            None
        }
    };
    Ok(MetaEvalReport {
        joined: human_abs.len(),
        kendall_abs_depth,
        pearson_rel_depth,
        consistency,
        consistency_items: pred.len(),
        agreement,
        notes,
    })
}
