//! Human judgment records and inter-annotator agreement.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{cohens_kappa, StatsError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AnnotationError {
    #[error("invalid annotation: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("no dialogue has two annotations")]
    NoDoubleAnnotations,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharacterJudgment {
    pub index: usize,
    /// 0 out of character, 1 in character, 0.5 undecided.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgoalMark {
    pub index: usize,
    /// "0", a question number "q", or "q.r" for the r-th closing line of q.
    pub mark: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Helpfulness {
    Up,
    Down,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub dialogue_id: String,
    pub annotator_id: String,
    pub per_utterance_character: Vec<CharacterJudgment>,
    pub subgoal_marks: Vec<SubgoalMark>,
    pub success: f64,
    pub quality: i64,
    pub ended: i64,
    pub helpfulness: Helpfulness,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

fn is_ternary(v: f64) -> bool {
    v == 0.0 || v == 0.5 || v == 1.0
}

pub fn is_valid_mark(mark: &str) -> bool {
    let number = |s: &str| {
        !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && !s.starts_with('0')
    };
    match mark.split_once('.') {
        None => mark == "0" || number(mark),
        Some((q, r)) => number(q) && number(r),
    }
}

impl Annotation {
    pub fn key(&self) -> String {
        format!("{}:{}", self.dialogue_id, self.annotator_id)
    }

    /// Check every field against its allowed range; indices must fall inside
    /// a transcript of `n_utterances`.
    pub fn validate(&self, n_utterances: usize) -> Result<(), AnnotationError> {
        let mut problems = Vec::new();
        if self.dialogue_id.is_empty() {
            problems.push("dialogue_id is empty".to_string());
        }
        if self.annotator_id.is_empty() {
            problems.push("annotator_id is empty".to_string());
        }
        let mut seen = vec![false; n_utterances];
        for j in &self.per_utterance_character {
            if j.index >= n_utterances {
                problems.push(format!("character index {} out of range", j.index));
            } else if std::mem::replace(&mut seen[j.index], true) {
                problems.push(format!("character index {} repeated", j.index));
            }
            if !is_ternary(j.value) {
                problems.push(format!("character value {} not in {{0, 0.5, 1}}", j.value));
            }
        }
        let mut seen = vec![false; n_utterances];
        for m in &self.subgoal_marks {
            if m.index >= n_utterances {
                problems.push(format!("subgoal index {} out of range", m.index));
            } else if std::mem::replace(&mut seen[m.index], true) {
                problems.push(format!("subgoal index {} repeated", m.index));
            }
            if !is_valid_mark(&m.mark) {
                problems.push(format!("subgoal mark `{}` malformed", m.mark));
            }
        }
        if !is_ternary(self.success) {
            problems.push(format!("success {} not in {{0, 0.5, 1}}", self.success));
        }
        if !(1..=5).contains(&self.quality) {
            problems.push(format!("quality {} not in 1..=5", self.quality));
        }
        if !(0..=1).contains(&self.ended) {
            problems.push(format!("ended {} not in {{0, 1}}", self.ended));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AnnotationError::Invalid(problems))
        }
    }

    /// Number of distinct subgoals the annotator marked.
    pub fn abs_depth(&self) -> usize {
        let mut marks: Vec<&str> = self
            .subgoal_marks
            .iter()
            .map(|m| m.mark.as_str())
            .filter(|m| *m != "0")
            .collect();
        marks.sort_unstable();
        marks.dedup();
        marks.len()
    }
}

/// Judgment dimensions compared for agreement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Character,
    Subgoals,
    Success,
    Quality,
    Ended,
    Helpfulness,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Character => "character",
            Dimension::Subgoals => "subgoals",
            Dimension::Success => "success",
            Dimension::Quality => "quality",
            Dimension::Ended => "ended",
            Dimension::Helpfulness => "helpfulness",
        })
    }
}

/// Quality coarsened to three bins.
pub fn quality_bin(q: i64) -> &'static str {
    match q {
        i64::MIN..=2 => "low",
        3 => "mid",
        _ => "high",
    }
}

fn ternary_label(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Kappa over all items of all dimensions, categories tagged by dimension.
    pub overall: f64,
    pub per_dimension: BTreeMap<Dimension, f64>,
    pub doubly_annotated: usize,
    pub items: usize,
}

/// Paired categorical labels for every doubly annotated dialogue. When more
/// than two annotators judged a dialogue, the two smallest annotator ids are
/// compared.
pub fn paired_labels(annotations: &[Annotation]) -> (BTreeMap<Dimension, (Vec<String>, Vec<String>)>, usize) {
    let mut by_dialogue: BTreeMap<&str, BTreeMap<&str, &Annotation>> = BTreeMap::new();
    for a in annotations {
        by_dialogue
            .entry(a.dialogue_id.as_str())
            .or_default()
            .insert(a.annotator_id.as_str(), a);
    }
    let mut pairs: BTreeMap<Dimension, (Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut doubly = 0;
    for annotators in by_dialogue.values() {
        let mut it = annotators.values();
        let (Some(a), Some(b)) = (it.next(), it.next()) else { continue };
        doubly += 1;
        let mut push = |dim: Dimension, x: String, y: String| {
            let entry = pairs.entry(dim).or_default();
            entry.0.push(x);
            entry.1.push(y);
        };
        let chars_b: BTreeMap<usize, f64> = b.per_utterance_character.iter().map(|j| (j.index, j.value)).collect();
        for j in &a.per_utterance_character {
            if let Some(v) = chars_b.get(&j.index) {
                push(Dimension::Character, ternary_label(j.value), ternary_label(*v));
            }
        }
        let marks_b: BTreeMap<usize, &str> = b.subgoal_marks.iter().map(|m| (m.index, m.mark.as_str())).collect();
        for m in &a.subgoal_marks {
            if let Some(v) = marks_b.get(&m.index) {
                push(Dimension::Subgoals, m.mark.clone(), v.to_string());
            }
        }
        push(Dimension::Success, ternary_label(a.success), ternary_label(b.success));
        push(Dimension::Quality, quality_bin(a.quality).into(), quality_bin(b.quality).into());
        push(Dimension::Ended, a.ended.to_string(), b.ended.to_string());
        push(
            Dimension::Helpfulness,
            format!("{:?}", a.helpfulness),
            format!("{:?}", b.helpfulness),
        );
    }
    (pairs, doubly)
}

pub fn agreement(annotations: &[Annotation]) -> Result<AgreementReport, AnnotationError> {
    let (pairs, doubly) = paired_labels(annotations);
    if doubly == 0 {
        return Err(AnnotationError::NoDoubleAnnotations);
    }
    let mut per_dimension = BTreeMap::new();
    let (mut all_a, mut all_b) = (Vec::new(), Vec::new());
    for (dim, (a, b)) in &pairs {
        per_dimension.insert(*dim, cohens_kappa(a, b)?);
        all_a.extend(a.iter().map(|v| format!("{dim}:{v}")));
        all_b.extend(b.iter().map(|v| format!("{dim}:{v}")));
    }
    Ok(AgreementReport {
        overall: cohens_kappa(&all_a, &all_b)?,
        per_dimension,
        doubly_annotated: doubly,
        items: all_a.len(),
    })
}
