//! Text similarity and diversity measures.
//!
//! ROUGE-L here is the whole-text variant: one LCS over the full token
//! sequences, balanced F-measure, no stemming and no stopword removal.

use std::collections::{BTreeMap, HashSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Highest n-gram order counted by [`diversity_counts`].
pub const MAX_NGRAM_ORDER: usize = 5;

/// Default cap on the number of dialogue pairs compared by [`pairwise_diversity`].
pub const DEFAULT_MAX_PAIRS: usize = 25;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("pairwise diversity needs at least two dialogues, got {0}")]
    InsufficientDialogues(usize),
}

/// Lowercase and split on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence of two token sequences.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut curr = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                curr[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(lcs: usize, cand_len: usize, ref_len: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(lcs, cand_len);
        let recall = ratio(lcs, ref_len);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(
        lcs_length(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiversityCounts {
    pub unique_words: usize,
    /// Distinct n-grams of orders 1 through [`MAX_NGRAM_ORDER`], pooled.
    pub unique_ngrams: usize,
    pub per_order: BTreeMap<usize, usize>,
}

/// Unique words and n-grams over the utterances of one dialogue. N-grams never
/// span two utterances.
pub fn diversity_counts<S: AsRef<str>>(utterances: &[S]) -> DiversityCounts {
    let tokenized: Vec<Vec<String>> = utterances.iter().map(|u| tokenize(u.as_ref())).collect();
    let mut per_order = BTreeMap::new();
    for order in 1..=MAX_NGRAM_ORDER {
        let grams: HashSet<&[String]> = tokenized
            .iter()
            .flat_map(|tokens| tokens.windows(order))
            .collect();
        per_order.insert(order, grams.len());
    }
    DiversityCounts {
        unique_words: per_order[&1],
        unique_ngrams: per_order.values().sum(),
        per_order,
    }
}

/// One minus the mean ROUGE-L F1 over up to `max_pairs` distinct unordered
/// pairs of transcripts, sampled without replacement under `seed`.
pub fn pairwise_diversity<S: AsRef<str>>(
    transcripts: &[S],
    max_pairs: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let n = transcripts.len();
    if n < 2 {
        return Err(MetricsError::InsufficientDialogues(n));
    }
    let tokens: Vec<Vec<String>> = transcripts.iter().map(|t| tokenize(t.as_ref())).collect();
    let pairs = sample_pairs(n, max_pairs, seed);
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| rouge_l_tokens(&tokens[i], &tokens[j]).f1)
        .sum();
    Ok(1.0 - total / pairs.len() as f64)
}

/// Distinct unordered index pairs `(i, j)` with `i < j`; all of them when
/// there are at most `max_pairs`.
pub fn sample_pairs(n: usize, max_pairs: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    if all.len() <= max_pairs {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), max_pairs).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| all[k]).collect()
}
