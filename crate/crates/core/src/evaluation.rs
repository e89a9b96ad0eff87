//! Coverage, selection quality and per-verifier diagnostics.

use std::collections::HashSet;
use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{DatasetBundle, ScoreTensor};
use crate::error::{Error, Result};
use crate::preprocess::VoteTensor;
use crate::scalar::Real;
use crate::stats;
use crate::ws::{argmax_first, SelectionResult};

/// `1 - C(K - c, k) / C(K, k)` for one query, as a running product of ratios.
pub fn pass_at_k_single<T: Real>(total: usize, correct: usize, k: usize) -> T {
    if total - correct < k {
        return T::one();
    }
    let mut miss = T::one();
    for i in 0..k {
        miss = miss * T::from_count(total - correct - i) / T::from_count(total - i);
    }
    T::one() - miss
}

/// Unbiased Pass@k averaged over queries; `labels` is `(n, K)`.
pub fn pass_at_k<T: Real>(labels: ArrayView2<u8>, k: usize) -> Result<T> {
    let (n, total) = labels.dim();
    if k == 0 || k > total {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={total}")));
    }
    if n == 0 {
        return Err(Error::Dimension("no queries".into()));
    }
    let sum: T = labels
        .rows()
        .into_iter()
        .map(|row| pass_at_k_single::<T>(total, row.iter().filter(|&&y| y == 1).count(), k))
        .sum();
    Ok(sum / T::from_count(n))
}

/// Fraction of queries whose chosen response is correct.
pub fn success_rate<T: Real>(selection: &SelectionResult, labels: ArrayView2<u8>) -> Result<T> {
    let (n, k) = labels.dim();
    if selection.len() != n || n == 0 {
        return Err(Error::Dimension(format!(
            "selection covers {} queries, labels {n}",
            selection.len()
        )));
    }
    let mut hits = 0;
    for (i, &j) in selection.chosen.iter().enumerate() {
        if j >= k {
            return Err(Error::Dimension(format!("query {i}: choice {j} >= K = {k}")));
        }
        hits += usize::from(labels[[i, j]] == 1);
    }
    Ok(T::from_count(hits) / T::from_count(n))
}

pub fn generation_verification_gap<T: Real>(pass_k: T, success: T) -> T {
    pass_k - success
}

/// Picks a correct response whenever one exists (first one), else response 0.
pub fn oracle_select(labels: ArrayView2<u8>) -> SelectionResult {
    SelectionResult {
        chosen: labels
            .rows()
            .into_iter()
            .map(|row| row.iter().position(|&y| y == 1).unwrap_or(0))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierStats {
    pub id: String,
    /// Success rate when selecting by this verifier's score alone.
    pub selection_accuracy: f64,
    /// Vote-level accuracy against labels, when votes are available.
    pub mean_accuracy: Option<f64>,
    /// `Pr(vote = 1 | y = 0)`.
    pub fpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierDiagnostics {
    pub per_verifier: Vec<VerifierStats>,
    pub accuracy_range: f64,
    /// Mean pairwise Pearson correlation of flattened scores (zero-variance pairs skipped).
    pub mean_pairwise_correlation: Option<f64>,
}

/// Single-verifier selection accuracy for every score column, plus vote-level
/// accuracy and false positive rate for columns present in `votes`.
pub fn per_verifier_diagnostics<T: Real>(
    scores: &ScoreTensor<T>,
    votes: Option<&VoteTensor>,
    labels: ArrayView2<u8>,
) -> Result<VerifierDiagnostics> {
    if labels.dim() != (scores.n(), scores.k()) {
        return Err(Error::Dimension("labels do not match scores".into()));
    }
    let mut per_verifier = Vec::with_capacity(scores.m());
    for (kk, meta) in scores.verifiers().iter().enumerate() {
        let selection = SelectionResult {
            chosen: (0..scores.n())
                .map(|i| argmax_first((0..scores.k()).map(|j| scores.get(i, j, kk))))
                .collect(),
        };
        let selection_accuracy = success_rate::<f64>(&selection, labels)?;
        let col = votes.and_then(|v| v.kept.iter().position(|&orig| orig == kk).map(|c| (v, c)));
        let (mean_accuracy, fpr) = match col {
            Some((v, c)) => {
                let (mut agree, mut fp, mut neg) = (0usize, 0usize, 0usize);
                for ((i, j), &y) in labels.indexed_iter() {
                    let vote = v.votes[[i, j, c]];
                    agree += usize::from(vote == y);
                    if y == 0 {
                        neg += 1;
                        fp += usize::from(vote == 1);
                    }
                }
                let acc = agree as f64 / labels.len() as f64;
                let fpr = (neg > 0).then(|| fp as f64 / neg as f64);
                (Some(acc), fpr)
            }
            None => (None, None),
        };
        per_verifier.push(VerifierStats {
            id: meta.id.clone(),
            selection_accuracy,
            mean_accuracy,
            fpr,
        });
    }
    let accs: Vec<f64> = per_verifier.iter().map(|v| v.selection_accuracy).collect();
    let accuracy_range = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - accs.iter().copied().fold(f64::INFINITY, f64::min);

    let columns: Vec<Vec<f64>> = (0..scores.m())
        .map(|kk| scores.column(kk).into_iter().map(Real::as_f64).collect())
        .collect();
    let mut corr = Vec::new();
    for a in 0..columns.len() {
        for b in (a + 1)..columns.len() {
            if let Some(r) = stats::pearson(&columns[a], &columns[b]) {
                corr.push(r);
            }
        }
    }
    Ok(VerifierDiagnostics {
        per_verifier,
        accuracy_range,
        mean_pairwise_correlation: stats::mean(&corr),
    })
}

/// Mean success of `strategy` when every query only sees `k` of its `K`
/// responses, averaged over `trials` seeded draws. With `k == K` no
/// subsampling happens. Subsets keep their original generation order.
pub fn best_of_k_monte_carlo<T, F>(
    strategy: F,
    bundle: &DatasetBundle<T>,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<T>
where
    T: Real,
    F: Fn(&DatasetBundle<T>) -> Result<SelectionResult> + Sync,
{
    let total = bundle.k();
    if k == 0 || k > total {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={total}")));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let labels = bundle.require_labels()?.require_full()?;
    let results: Vec<Result<T>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let picks: Vec<Vec<usize>> = (0..bundle.n())
                .map(|_| {
                    if k == total {
                        (0..total).collect()
                    } else {
                        let mut idx = rand::seq::index::sample(&mut rng, total, k).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                })
                .collect();
            let sub = bundle.select_responses(&picks);
            let selection = strategy(&sub)?;
            let sub_labels = Array2::from_shape_fn((bundle.n(), k), |(i, j)| labels[[i, picks[i][j]]]);
            success_rate(&selection, sub_labels.view())
        })
        .collect();
    let mut sum = T::zero();
    for r in results {
        sum = sum + r?;
    }
    Ok(sum / T::from_count(trials))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DiversityCorrelation<T> {
    pub pearson: T,
    pub spearman: T,
    pub kendall: T,
    /// True when a correlation was undefined (zero variance) and reported as 0.
    pub degenerate: bool,
}

/// Correlation between per-query unique-answer counts and per-query correct ratios.
pub fn answer_diversity_correlation<T: Real>(
    answers: &Array2<String>,
    labels: ArrayView2<u8>,
) -> Result<DiversityCorrelation<T>> {
    let (n, k) = labels.dim();
    if answers.dim() != (n, k) {
        return Err(Error::Dimension("answers do not match labels".into()));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 queries, got {n}")));
    }
    let unique: Vec<T> = answers
        .rows()
        .into_iter()
        .map(|row| T::from_count(row.iter().map(|a| a.trim()).collect::<HashSet<_>>().len()))
        .collect();
    let ratio: Vec<T> = labels
        .rows()
        .into_iter()
        .map(|row| T::from_count(row.iter().filter(|&&y| y == 1).count()) / T::from_count(k))
        .collect();
    let p = stats::pearson(&unique, &ratio);
    let s = stats::spearman(&unique, &ratio);
    let kt = stats::kendall_tau_b(&unique, &ratio);
    let degenerate = p.is_none() || s.is_none() || kt.is_none();
    Ok(DiversityCorrelation {
        pearson: p.unwrap_or_else(T::zero),
        spearman: s.unwrap_or_else(T::zero),
        kendall: kt.unwrap_or_else(T::zero),
        degenerate,
    })
}

/// Forward-pass FLOPs per query: `2 * params * tokens` for the generator and
/// every verifier, times `k` responses.
pub fn flops_estimate(gen_params: f64, verifier_params: &[f64], tokens_per_response: f64, k: u64) -> f64 {
    let per_response = 2.0 * gen_params * tokens_per_response
        + verifier_params
            .iter()
            .map(|&p| 2.0 * p * tokens_per_response)
            .sum::<f64>();
    per_response * k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    pub success_rate: f64,
    pub gap: f64,
    /// Monte-Carlo best-of-k success at smaller budgets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub best_of_k: Vec<PassAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pass_at_k: Vec<PassAtK>,
    pub strategies: Vec<StrategyMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_verifier: Option<VerifierDiagnostics>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    /// Flat `kind,name,k,value` rows for plotting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["kind", "name", "k", "value"])?;
        for p in &self.pass_at_k {
            wtr.write_record(["pass_at_k", "oracle", &p.k.to_string(), &p.value.to_string()])?;
        }
        for s in &self.strategies {
            wtr.write_record(["success_rate", &s.strategy, "", &s.success_rate.to_string()])?;
            wtr.write_record(["gap", &s.strategy, "", &s.gap.to_string()])?;
            for p in &s.best_of_k {
                wtr.write_record(["best_of_k", &s.strategy, &p.k.to_string(), &p.value.to_string()])?;
            }
        }
        if let Some(d) = &self.per_verifier {
            for v in &d.per_verifier {
                wtr.write_record(["selection_accuracy", &v.id, "", &v.selection_accuracy.to_string()])?;
                if let Some(f) = v.fpr {
                    wtr.write_record(["fpr", &v.id, "", &f.to_string()])?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("metrics.csv", e))?;
        Ok(())
    }
}
