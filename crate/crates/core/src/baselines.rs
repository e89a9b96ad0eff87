//! Selection strategies that need no latent-variable model.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::ScoreTensor;
use crate::error::{Error, Result};
use crate::evaluation::success_rate;
use crate::scalar::{sigmoid, Real};
use crate::ws::{argmax_first, SelectionResult};

/// Always the first generated response.
pub fn first_sample(n: usize) -> SelectionResult {
    SelectionResult { chosen: vec![0; n] }
}

/// Most frequent trimmed answer per query; the chosen index is that answer's
/// first occurrence. Ties go to the answer seen first.
pub fn majority_vote(answers: &Array2<String>) -> SelectionResult {
    let chosen = answers
        .rows()
        .into_iter()
        .map(|row| {
            let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
            for (j, a) in row.iter().enumerate() {
                counts.entry(a.trim()).or_insert((0, j)).0 += 1;
            }
            counts
                .values()
                .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                .map_or(0, |&(_, first)| first)
        })
        .collect();
    SelectionResult { chosen }
}

/// Same as [`majority_vote`] but errors when no answers were loaded.
pub fn majority_vote_opt(answers: Option<&Array2<String>>) -> Result<SelectionResult> {
    answers
        .map(majority_vote)
        .ok_or_else(|| Error::InvalidArgument("majority vote needs extracted answers".into()))
}

fn mean_score_argmax<T: Real>(scores: &ScoreTensor<T>, columns: &[usize]) -> SelectionResult {
    let denom = T::from_count(columns.len().max(1));
    let chosen = (0..scores.n())
        .map(|i| {
            argmax_first((0..scores.k()).map(|j| columns.iter().map(|&c| scores.get(i, j, c)).sum::<T>() / denom))
        })
        .collect();
    SelectionResult { chosen }
}

/// Argmax of the unweighted mean score; expects normalized scores.
pub fn naive_ensemble<T: Real>(scores: &ScoreTensor<T>) -> SelectionResult {
    let all: Vec<usize> = (0..scores.m()).collect();
    mean_score_argmax(scores, &all)
}

/// Verifier indices ordered by single-verifier selection success on `labels`,
/// best first; equal success keeps column order.
pub fn rank_verifiers<T: Real>(scores: &ScoreTensor<T>, labels: ArrayView2<u8>) -> Result<Vec<usize>> {
    let mut ranked = Vec::with_capacity(scores.m());
    for c in 0..scores.m() {
        let sel = mean_score_argmax(scores, &[c]);
        ranked.push((c, success_rate::<f64>(&sel, labels)?));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked.into_iter().map(|(c, _)| c).collect())
}

/// Naive ensemble over the `k` verifiers that select best on the labels.
pub fn top_k_oracle_ensemble<T: Real>(scores: &ScoreTensor<T>, labels: ArrayView2<u8>, k: usize) -> Result<SelectionResult> {
    if k == 0 || k > scores.m() {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", scores.m())));
    }
    let mut keep = rank_verifiers(scores, labels)?;
    keep.truncate(k);
    keep.sort_unstable();
    Ok(mean_score_argmax(scores, &keep))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LogRegModel<T> {
    pub weights: Vec<T>,
    pub bias: T,
    pub trained_on: FeatureKind,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegConfig {
    pub l2: f64,
    /// Fraction of rows used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            train_fraction: 1.0,
            seed: 0,
            max_iters: 10_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRegFit<T> {
    pub model: LogRegModel<T>,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
}

/// Seeded split of `0..n` into sorted train and holdout row lists.
pub fn train_holdout_split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("train_fraction {train_fraction} outside (0, 1]")));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = rand::seq::index::sample(&mut rng, n, n_train.min(n)).into_vec();
    train.sort_unstable();
    let mut in_train = vec![false; n];
    train.iter().for_each(|&r| in_train[r] = true);
    let holdout = (0..n).filter(|&r| !in_train[r]).collect();
    Ok((train, holdout))
}

/// L2-regularized logistic regression by full-batch gradient descent on the
/// mean log-loss, with step `1 / L` for the loss's Lipschitz bound `L`.
pub fn logreg_fit<T: Real>(
    features: ArrayView2<T>,
    labels: &[u8],
    kind: FeatureKind,
    cfg: &LogRegConfig,
) -> Result<LogRegFit<T>> {
    let (rows, m) = features.dim();
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{rows} feature rows, {} labels", labels.len())));
    }
    if rows == 0 || m == 0 {
        return Err(Error::Dimension("empty feature matrix".into()));
    }
    if !(cfg.l2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("l2 must be >= 0, got {}", cfg.l2)));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite feature".into()));
    }
    let (train, holdout) = train_holdout_split(rows, cfg.train_fraction, cfg.seed)?;
    let x: Array2<f64> = Array2::from_shape_fn((train.len(), m), |(r, c)| features[[train[r], c]].as_f64());
    let y: Array1<f64> = train.iter().map(|&r| f64::from(labels[r])).collect();
    let nt = train.len() as f64;

    let mean_sq_norm = x.rows().into_iter().map(|r| 1.0 + r.dot(&r)).sum::<f64>() / nt;
    let step = 1.0 / (0.25 * mean_sq_norm + cfg.l2);
    let mut w = Array1::<f64>::zeros(m);
    let mut b = 0.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let z = x.dot(&w) + b;
        let resid: Array1<f64> = z.iter().zip(&y).map(|(&zi, &yi)| sigmoid(zi) - yi).collect();
        let gw = x.t().dot(&resid) / nt + &w * cfg.l2;
        let gb = resid.sum() / nt;
        let norm = (gw.dot(&gw) + gb * gb).sqrt();
        if norm <= cfg.grad_tol {
            converged = true;
            break;
        }
        w = w - gw * step;
        b -= step * gb;
        iterations += 1;
    }
    Ok(LogRegFit {
        model: LogRegModel {
            weights: w.iter().map(|&v| T::lit(v)).collect(),
            bias: T::lit(b),
            trained_on: kind,
            iterations,
            converged,
        },
        train_rows: train,
        holdout_rows: holdout,
    })
}

/// `sigmoid(w . x + b)` per row.
pub fn logreg_predict<T: Real>(model: &LogRegModel<T>, features: ArrayView2<T>) -> Result<Vec<T>> {
    if features.ncols() != model.weights.len() {
        return Err(Error::Dimension(format!(
            "model has {} weights, features have {} columns",
            model.weights.len(),
            features.ncols()
        )));
    }
    Ok(features
        .rows()
        .into_iter()
        .map(|row| sigmoid(row.iter().zip(&model.weights).map(|(&x, &w)| x * w).sum::<T>() + model.bias))
        .collect())
}
