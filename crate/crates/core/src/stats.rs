//! Correlations, agreement, classification metrics and l1-regularized
//! regression.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StatsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("all pairs are tied")]
    AllTied,
    #[error("input contains non-finite values")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Two equal-length finite series of length at least 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PairedSeries {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        check_pair(&x, &y)?;
        Ok(PairedSeries { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort { needed: 2, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b in O(n log n) by sorting and merge-counting exchanges.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as i128;
    let tied_runs = |eq: &dyn Fn(usize, usize) -> bool| -> i128 {
        let mut total = 0i128;
        let mut run = 1i128;
        for i in 1..n {
            if eq(i - 1, i) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let n1 = tied_runs(&|a, b| pairs[a].0 == pairs[b].0);
    let n3 = tied_runs(&|a, b| pairs[a] == pairs[b]);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys) as i128;
    let n2 = {
        let mut total = 0i128;
        let mut run = 1i128;
        for i in 1..n {
            if ys[i] == ys[i - 1] {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let denom = ((n0 - n1) as f64) * ((n0 - n2) as f64);
    if denom == 0.0 {
        return Err(StatsError::AllTied);
    }
    let s = n0 - n1 - n2 + n3 - 2 * swaps;
    Ok((s as f64 / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            merged.push(v[i]);
            i += 1;
        } else {
            merged.push(v[j]);
            count += (mid - i) as u64;
            j += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..]);
    v.copy_from_slice(&merged);
    count
}

/// Unweighted Cohen's kappa. Returns 1.0 when chance agreement is certain and
/// observed agreement is perfect.
pub fn cohens_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooShort { needed: 1, got: 0 });
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ca: HashMap<&T, usize> = HashMap::new();
    let mut cb: HashMap<&T, usize> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let pe: f64 = ca
        .iter()
        .map(|(k, &na)| na as f64 * cb.get(k).copied().unwrap_or(0) as f64)
        .sum::<f64>()
        / (n * n);
    let po = agree / n;
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(if po == 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn classification_metrics(pred: &[bool], gold: &[bool]) -> Result<ClassificationMetrics> {
    if pred.len() != gold.len() {
        return Err(StatsError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(StatsError::TooShort { needed: 1, got: 0 });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, pred.len()),
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub standardized: bool,
    pub iterations: usize,
}

/// Coordinate-descent stopping rule: largest coefficient change per sweep.
pub const LASSO_TOL: f64 = 1e-12;
pub const LASSO_MAX_SWEEPS: usize = 1_000_000;

pub fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Columns scaled to zero mean and unit (population) variance. Constant
/// columns become all zero.
pub fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let m = col.mean().unwrap_or(0.0);
        let sd = col.mapv(|v| (v - m).powi(2)).mean().unwrap_or(0.0).sqrt();
        if sd > 0.0 {
            col.mapv_inplace(|v| (v - m) / sd);
        } else {
            col.fill(0.0);
        }
    }
    out
}

fn check_design(x: &Array2<f64>, y: &Array1<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(StatsError::LengthMismatch(x.nrows(), y.len()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Minimize ½‖y − Xβ‖² + λ‖β‖₁ without intercept, optionally standardizing
/// the columns of X first.
pub fn lasso_fit(x: &Array2<f64>, y: &Array1<f64>, lambda: f64, standardize: bool) -> Result<RegressionFit> {
    check_design(x, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let x = if standardize { standardize_columns(x) } else { x.clone() };
    let p = x.ncols();
    let norms: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.dot(&c)).collect();
    let mut beta = vec![0.0; p];
    let mut resid = y.clone();
    let mut iterations = 0;
    while iterations < LASSO_MAX_SWEEPS {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let col: ArrayView1<f64> = x.column(j);
            let rho = col.dot(&resid) + norms[j] * beta[j];
            let new = soft_threshold(rho, lambda) / norms[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.scaled_add(-delta, &col);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < LASSO_TOL {
            break;
        }
    }
    Ok(RegressionFit {
        coefficients: beta,
        lambda,
        standardized: standardize,
        iterations,
    })
}

/// Smallest λ giving the all-zero solution.
pub fn lambda_max(x: &Array2<f64>, y: &Array1<f64>) -> f64 {
    x.t().dot(y).iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    pub cv_error: Vec<f64>,
    pub fit: RegressionFit,
}

/// Choose λ by k-fold cross-validation (folds by index modulo k) over a
/// geometric grid from λ_max down to λ_max·1e-4, then refit on all rows.
pub fn lasso_cv(x: &Array2<f64>, y: &Array1<f64>, k: usize, standardize: bool) -> Result<CvResult> {
    check_design(x, y)?;
    let n = x.nrows();
    if n < 2 {
        return Err(StatsError::TooShort { needed: 2, got: n });
    }
    let k = k.clamp(2, n);
    let xs = if standardize { standardize_columns(x) } else { x.clone() };
    let top = lambda_max(&xs, y);
    const STEPS: usize = 30;
    let grid: Vec<f64> = if top == 0.0 {
        vec![0.0]
    } else {
        (0..STEPS)
            .map(|i| top * 10f64.powf(-4.0 * i as f64 / (STEPS - 1) as f64))
            .collect()
    };
    let mut cv_error = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let mut sse = 0.0;
        for fold in 0..k {
            let train: Vec<usize> = (0..n).filter(|i| i % k != fold).collect();
            let test: Vec<usize> = (0..n).filter(|i| i % k == fold).collect();
            let fit = lasso_fit(&xs.select(Axis(0), &train), &y.select(Axis(0), &train), lambda, false)?;
            let beta = Array1::from(fit.coefficients);
            let pred = xs.select(Axis(0), &test).dot(&beta);
            sse += (&pred - &y.select(Axis(0), &test)).mapv(|e| e * e).sum();
        }
        cv_error.push(sse / n as f64);
    }
    let best = cv_error
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if *e < cv_error[b] { i } else { b });
    let lambda = grid[best];
    let mut fit = lasso_fit(&xs, y, lambda, false)?;
    fit.standardized = standardize;
    Ok(CvResult {
        lambda,
        grid,
        cv_error,
        fit,
    })
}
