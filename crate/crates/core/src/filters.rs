//! Selection rules deciding which scored dialogues enter the fine-tuning set.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::DialogueScore;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FilterError {
    #[error("nothing to filter")]
    EmptyInput,
    #[error("invalid filter `{0}`: {1}")]
    Parse(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum FilterSpec {
    None,
    RandomFrac { p: f64, seed: u64 },
    AbsSubgoals { k: usize },
    FracSubgoals { p: f64 },
    HasEnded,
}

impl FilterSpec {
    /// Parse the CLI grammar `none|random:P|abs-subgoals:K|frac-subgoals:P|has-ended`.
    pub fn parse(s: &str, seed: u64) -> Result<Self, FilterError> {
        let err = |msg: &str| FilterError::Parse(s.to_string(), msg.to_string());
        let frac = |v: &str| -> Result<f64, FilterError> {
            let p: f64 = v.parse().map_err(|_| err("expected a number"))?;
            if p > 0.0 && p <= 1.0 {
                Ok(p)
            } else {
                Err(err("fraction must lie in (0, 1]"))
            }
        };
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("none", None) => Ok(FilterSpec::None),
            ("has-ended", None) => Ok(FilterSpec::HasEnded),
            ("random", Some(a)) => Ok(FilterSpec::RandomFrac { p: frac(a)?, seed }),
            ("frac-subgoals", Some(a)) => Ok(FilterSpec::FracSubgoals { p: frac(a)? }),
            ("abs-subgoals", Some(a)) => Ok(FilterSpec::AbsSubgoals {
                k: a.parse().map_err(|_| err("expected a count"))?,
            }),
            _ => Err(err("unknown strategy")),
        }
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterSpec::None => f.write_str("none"),
            FilterSpec::RandomFrac { p, .. } => write!(f, "random:{p}"),
            FilterSpec::AbsSubgoals { k } => write!(f, "abs-subgoals:{k}"),
            FilterSpec::FracSubgoals { p } => write!(f, "frac-subgoals:{p}"),
            FilterSpec::HasEnded => f.write_str("has-ended"),
        }
    }
}

impl FromStr for FilterSpec {
    type Err = FilterError;

    /// Random filters parsed this way use seed 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterSpec::parse(s, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total: usize,
    pub kept: usize,
    pub filtered_fraction: f64,
    /// Kept dialogue ids, in input order.
    pub kept_ids: Vec<String>,
}

/// max(1, floor(p * total)), guarding against float round-down.
pub fn sample_size(p: f64, total: usize) -> usize {
    (((p * total as f64) + 1e-9).floor() as usize).clamp(1, total)
}

pub fn apply_filter(scores: &[DialogueScore], spec: &FilterSpec) -> Result<FilterReport, FilterError> {
    if scores.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    let total = scores.len();
    let mut keep = vec![false; total];
    match *spec {
        FilterSpec::None => keep.fill(true),
        FilterSpec::RandomFrac { p, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in index::sample(&mut rng, total, sample_size(p, total)) {
                keep[i] = true;
            }
        }
        FilterSpec::AbsSubgoals { k } => {
            for (flag, s) in keep.iter_mut().zip(scores) {
                *flag = s.abs_depth >= k;
            }
        }
        FilterSpec::FracSubgoals { p } => {
            let mut order: Vec<usize> = (0..total).collect();
            order.sort_by(|&a, &b| rank_order(&scores[a], &scores[b]));
            for &i in &order[..sample_size(p, total)] {
                keep[i] = true;
            }
        }
        FilterSpec::HasEnded => {
            for (flag, s) in keep.iter_mut().zip(scores) {
                *flag = s.ended;
            }
        }
    }
    let kept_ids: Vec<String> = scores
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(s, _)| s.dialogue_id.clone())
        .collect();
    let kept = kept_ids.len();
    Ok(FilterReport {
        total,
        kept,
        filtered_fraction: (total - kept) as f64 / total as f64,
        kept_ids,
    })
}

/// rel_depth desc, abs_depth desc, dialogue_id asc.
fn rank_order(a: &DialogueScore, b: &DialogueScore) -> Ordering {
    b.rel_depth
        .total_cmp(&a.rel_depth)
        .then(b.abs_depth.cmp(&a.abs_depth))
        .then_with(|| a.dialogue_id.cmp(&b.dialogue_id))
}
