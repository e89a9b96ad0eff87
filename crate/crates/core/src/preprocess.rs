//! Normalization, binarization and marginal-based filtering of verifier outputs.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datastore::{LabelSet, ScoreTensor, VerifierKind};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::stats::{self, total_cmp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationSpec {
    pub lo_percentile: f64,
    pub hi_percentile: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            lo_percentile: 5.0,
            hi_percentile: 95.0,
        }
    }
}

impl NormalizationSpec {
    /// Plain min-max scaling.
    pub fn min_max() -> Self {
        Self {
            lo_percentile: 0.0,
            hi_percentile: 100.0,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = 0.0 <= self.lo_percentile
            && self.lo_percentile < self.hi_percentile
            && self.hi_percentile <= 100.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "percentiles must satisfy 0 <= lo < hi <= 100, got {} / {}",
                self.lo_percentile, self.hi_percentile
            )))
        }
    }
}

/// Normalized scores plus the verifiers whose percentile range collapsed.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized<T> {
    pub tensor: ScoreTensor<T>,
    /// Original column indices flagged as constant (`p_hi == p_lo`).
    pub degenerate: Vec<usize>,
}

impl<T: Real> Normalized<T> {
    /// Wraps scores that are already in `[0, 1]`.
    pub fn passthrough(tensor: ScoreTensor<T>) -> Self {
        Self {
            tensor,
            degenerate: Vec::new(),
        }
    }
}

/// Maps every continuous verifier onto `[0, 1]` by its own percentile range,
/// `s' = clamp((s - p_lo) / (p_hi - p_lo), 0, 1)`. Judges pass through.
pub fn normalize<T: Real>(tensor: &ScoreTensor<T>, spec: &NormalizationSpec) -> Result<Normalized<T>> {
    spec.check()?;
    let mut scores = tensor.scores().clone();
    let mut degenerate = Vec::new();
    let lo_p = T::lit(spec.lo_percentile);
    let hi_p = T::lit(spec.hi_percentile);
    for (kk, meta) in tensor.verifiers().iter().enumerate() {
        if meta.kind == VerifierKind::BinaryJudge {
            continue;
        }
        let mut col = tensor.column(kk);
        col.sort_by(total_cmp);
        let lo = stats::percentile_sorted(&col, lo_p);
        let hi = stats::percentile_sorted(&col, hi_p);
        if hi <= lo {
            degenerate.push(kk);
            continue;
        }
        let span = hi - lo;
        scores
            .index_axis_mut(Axis(2), kk)
            .mapv_inplace(|s| ((s - lo) / span).max(T::zero()).min(T::one()));
    }
    Ok(Normalized {
        tensor: tensor.with_scores(scores),
        degenerate,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevObjective {
    #[default]
    Accuracy,
    BalancedAccuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum BinarizationStrategy {
    FixedThreshold {
        #[serde(default = "half")]
        threshold: f64,
    },
    DevAdaptive {
        #[serde(default = "threshold_grid")]
        grid: Vec<f64>,
        #[serde(default)]
        objective: DevObjective,
    },
    ClassBalance,
    Quantile {
        #[serde(default = "default_quantile")]
        q: f64,
    },
}

fn half() -> f64 {
    0.5
}

fn default_quantile() -> f64 {
    0.85
}

impl Default for BinarizationStrategy {
    fn default() -> Self {
        BinarizationStrategy::DevAdaptive {
            grid: threshold_grid(),
            objective: DevObjective::Accuracy,
        }
    }
}

/// `{0.05, 0.10, ..., 0.95}`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    ConstantOutput,
    SkewedMarginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedVerifier {
    pub verifier_id: String,
    pub reason: DropReason,
    pub positive_rate: f64,
}

/// Binary votes over the verifiers that are still in play.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteTensor {
    /// `(n, K, kept.len())`, entries in `{0, 1}`.
    pub votes: Array3<u8>,
    /// Column `c` of `votes` is original verifier `kept[c]`.
    pub kept: Vec<usize>,
    /// Ids of all original verifiers.
    pub ids: Vec<String>,
    /// Threshold used per original verifier; `None` for judges and constant columns.
    pub thresholds: Vec<Option<f64>>,
    pub degenerate: Vec<usize>,
    pub dropped: Vec<DroppedVerifier>,
    /// Number of (threshold, verifier) dev evaluations spent by adaptive search.
    pub search_evaluations: usize,
}

impl VoteTensor {
    /// Wraps raw votes with every column kept.
    pub fn from_votes(votes: Array3<u8>, ids: Vec<String>) -> Result<Self> {
        let m = votes.dim().2;
        if ids.len() != m {
            return Err(Error::Dimension(format!("{} ids for {m} vote columns", ids.len())));
        }
        if votes.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("votes must be 0 or 1".into()));
        }
        Ok(Self {
            votes,
            kept: (0..m).collect(),
            ids,
            thresholds: vec![None; m],
            degenerate: Vec::new(),
            dropped: Vec::new(),
            search_evaluations: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.votes.dim().0
    }

    pub fn k(&self) -> usize {
        self.votes.dim().1
    }

    /// Kept verifier count.
    pub fn m(&self) -> usize {
        self.votes.dim().2
    }

    pub fn kept_ids(&self) -> Vec<String> {
        self.kept.iter().map(|&k| self.ids[k].clone()).collect()
    }

    /// Votes flattened to `(n * K) x m`.
    pub fn rows(&self) -> Array2<u8> {
        let (n, k, m) = self.votes.dim();
        self.votes
            .to_shape((n * k, m))
            .expect("contiguous reshape")
            .to_owned()
    }

    /// Mean vote per kept verifier.
    pub fn marginals(&self) -> Vec<f64> {
        let total = (self.n() * self.k()) as f64;
        (0..self.m())
            .map(|c| {
                let ones: usize = self.votes.index_axis(Axis(2), c).iter().map(|&v| v as usize).sum();
                if total > 0.0 {
                    ones as f64 / total
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn select_queries(&self, queries: &[usize]) -> Self {
        Self {
            votes: self.votes.select(Axis(0), queries),
            ..self.clone()
        }
    }

    pub fn select_responses(&self, picks: &[Vec<usize>]) -> Self {
        let k_new = picks.first().map_or(0, Vec::len);
        let votes = Array3::from_shape_fn((self.n(), k_new, self.m()), |(i, j, c)| {
            self.votes[[i, picks[i][j], c]]
        });
        Self { votes, ..self.clone() }
    }

    /// Keeps only the listed columns (indices into the current kept set).
    fn retain_columns(&self, cols: &[usize]) -> Self {
        Self {
            votes: self.votes.select(Axis(2), cols),
            kept: cols.iter().map(|&c| self.kept[c]).collect(),
            ..self.clone()
        }
    }
}

/// Per-verifier threshold search over a labeled dev slice.
///
/// Returns `(threshold, evaluations)`; ties go to the smallest threshold.
pub fn search_threshold<T: Real>(
    scores: &[T],
    labels: &[u8],
    grid: &[f64],
    objective: DevObjective,
) -> Result<(f64, usize)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::EmptyDev("threshold search needs labeled dev responses".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &t in grid {
        let thr = T::lit(t);
        let score = vote_objective(scores.iter().map(|&s| u8::from(s >= thr)), labels, objective);
        if score > best.1 {
            best = (t, score);
        }
    }
    Ok((best.0, grid.len()))
}

pub(crate) fn vote_objective(
    votes: impl Iterator<Item = u8>,
    labels: &[u8],
    objective: DevObjective,
) -> f64 {
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (v, &y) in votes.zip(labels) {
        if y == 1 {
            pos += 1;
            tp += usize::from(v == 1);
        } else {
            neg += 1;
            tn += usize::from(v == 0);
        }
    }
    match objective {
        DevObjective::Accuracy => (tp + tn) as f64 / (pos + neg).max(1) as f64,
        DevObjective::BalancedAccuracy => {
            let tpr = if pos > 0 { tp as f64 / pos as f64 } else { 0.0 };
            let tnr = if neg > 0 { tn as f64 / neg as f64 } else { 0.0 };
            let classes = usize::from(pos > 0) + usize::from(neg > 0);
            (tpr + tnr) / classes.max(1) as f64
        }
    }
}

/// Dev-slice scores of one verifier, paired with their labels.
pub(crate) fn dev_column<T: Real>(tensor: &ScoreTensor<T>, labels: &LabelSet, verifier: usize) -> (Vec<T>, Vec<u8>) {
    let mut scores = Vec::new();
    let mut ys = Vec::new();
    for i in labels.dev_queries() {
        for j in 0..tensor.k() {
            scores.push(tensor.get(i, j, verifier));
            ys.push(labels.labels[[i, j]]);
        }
    }
    (scores, ys)
}

/// Converts normalized scores into 0/1 votes, one threshold per verifier.
///
/// Judges vote `s >= 0.5`; constant columns vote 0 and are dropped later.
pub fn binarize<T: Real>(
    normalized: &Normalized<T>,
    strategy: &BinarizationStrategy,
    labels: Option<&LabelSet>,
    prior: Option<f64>,
) -> Result<VoteTensor> {
    let tensor = &normalized.tensor;
    let (n, k, m) = tensor.scores().dim();
    let mut votes = Array3::<u8>::zeros((n, k, m));
    let mut thresholds = vec![None; m];
    let mut evaluations = 0;

    if let BinarizationStrategy::ClassBalance = strategy {
        match prior {
            Some(p) if p > 0.0 && p < 1.0 => {}
            other => {
                return Err(Error::InvalidArgument(format!(
                    "class-balance binarization needs a prior in (0, 1), got {other:?}"
                )))
            }
        }
    }
    if let BinarizationStrategy::FixedThreshold { threshold: t } | BinarizationStrategy::Quantile { q: t } = strategy {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
        }
    }
    // judges and degenerate columns need no search, hence no dev labels
    let searched = tensor
        .verifiers()
        .iter()
        .enumerate()
        .any(|(kk, meta)| meta.kind != VerifierKind::BinaryJudge && !normalized.degenerate.contains(&kk));
    let dev = match strategy {
        BinarizationStrategy::DevAdaptive { .. } if searched => {
            let labels = labels.ok_or_else(|| Error::EmptyDev("adaptive thresholds need dev labels".into()))?;
            if labels.dev_queries().is_empty() {
                return Err(Error::EmptyDev("no dev queries marked".into()));
            }
            Some(labels)
        }
        _ => None,
    };

    for (kk, meta) in tensor.verifiers().iter().enumerate() {
        if normalized.degenerate.contains(&kk) {
            continue;
        }
        let col = tensor.column(kk);
        let (threshold, strict) = if meta.kind == VerifierKind::BinaryJudge {
            (T::lit(0.5), false)
        } else {
            let t = match strategy {
                BinarizationStrategy::FixedThreshold { threshold } => *threshold,
                BinarizationStrategy::DevAdaptive { grid, objective } => {
                    let (scores, ys) = dev_column(tensor, dev.expect("checked above"), kk);
                    let (t, evals) = search_threshold(&scores, &ys, grid, *objective)?;
                    evaluations += evals;
                    t
                }
                BinarizationStrategy::ClassBalance => {
                    let p = prior.expect("checked above");
                    stats::quantile(&col, T::lit(1.0 - p)).expect("non-empty").as_f64()
                }
                BinarizationStrategy::Quantile { q } => stats::quantile(&col, T::lit(*q)).expect("non-empty").as_f64(),
            };
            thresholds[kk] = Some(t);
            (T::lit(t), matches!(strategy, BinarizationStrategy::Quantile { .. }))
        };
        let mut slice = votes.index_axis_mut(Axis(2), kk);
        for ((i, j), v) in slice.indexed_iter_mut() {
            let s = tensor.get(i, j, kk);
            let positive = if strict { s > threshold } else { s >= threshold };
            *v = u8::from(positive);
        }
    }

    Ok(VoteTensor {
        votes,
        kept: (0..m).collect(),
        ids: tensor.verifiers().iter().map(|v| v.id.clone()).collect(),
        thresholds,
        degenerate: normalized.degenerate.clone(),
        dropped: Vec::new(),
        search_evaluations: evaluations,
    })
}

/// Drops constant verifiers, then applies the prior-dependent marginal rule:
/// middle prior keeps `rho in [0.2, 0.8]`, low prior drops `rho > 0.8`,
/// high prior drops `rho < 0.2`. Boundaries of the prior are inclusive in the
/// middle branch.
pub fn filter_verifiers(votes: &VoteTensor, prior: f64) -> Result<VoteTensor> {
    if !(prior > 0.0 && prior < 1.0) {
        return Err(Error::InvalidArgument(format!("prior must lie in (0, 1), got {prior}")));
    }
    drop_verifiers(votes, Some(prior))
}

/// Drops only constant verifiers; used when marginal filtering is off.
pub fn drop_constant_verifiers(votes: &VoteTensor) -> Result<VoteTensor> {
    drop_verifiers(votes, None)
}

fn drop_verifiers(votes: &VoteTensor, prior: Option<f64>) -> Result<VoteTensor> {
    let marginals = votes.marginals();
    let mut keep = Vec::new();
    let mut dropped = votes.dropped.clone();
    for (c, &rho) in marginals.iter().enumerate() {
        let original = votes.kept[c];
        let constant = votes.degenerate.contains(&original) || rho == 0.0 || rho == 1.0;
        let reason = if constant {
            Some(DropReason::ConstantOutput)
        } else if let Some(prior) = prior {
            let skewed = if (0.2..=0.8).contains(&prior) {
                !(0.2..=0.8).contains(&rho)
            } else if prior < 0.2 {
                rho > 0.8
            } else {
                rho < 0.2
            };
            skewed.then_some(DropReason::SkewedMarginal)
        } else {
            None
        };
        match reason {
            Some(reason) => dropped.push(DroppedVerifier {
                verifier_id: votes.ids[original].clone(),
                reason,
                positive_rate: rho,
            }),
            None => keep.push(c),
        }
    }
    if keep.is_empty() {
        return Err(Error::NoVerifiersSurvive);
    }
    let mut out = votes.retain_columns(&keep);
    out.dropped = dropped;
    Ok(out)
}

/// Ridge-regularized inverse sample covariance of the columns of `data`
/// (`lambda = 1e-6 * trace / m`). Diagnostics only.
pub fn precision_matrix<T: Real>(data: ArrayView2<T>) -> Result<Array2<T>> {
    let (rows, m) = data.dim();
    if m == 0 || rows < m + 1 {
        return Err(Error::InvalidArgument(format!(
            "precision matrix needs at least m + 1 = {} rows, got {rows}",
            m + 1
        )));
    }
    let means: Vec<f64> = (0..m)
        .map(|c| data.column(c).iter().map(|v| v.as_f64()).sum::<f64>() / rows as f64)
        .collect();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(m, m);
    for row in data.rows() {
        for a in 0..m {
            let da = row[a].as_f64() - means[a];
            for b in a..m {
                let db = row[b].as_f64() - means[b];
                cov[(a, b)] += da * db;
            }
        }
    }
    for a in 0..m {
        for b in a..m {
            let v = cov[(a, b)] / (rows - 1) as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let lambda = 1e-6 * cov.trace() / m as f64;
    let lambda = if lambda > 0.0 { lambda } else { 1e-12 };
    for a in 0..m {
        cov[(a, a)] += lambda;
    }
    let inv = cov
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("covariance not invertible after ridge".into()))?;
    Ok(Array2::from_shape_fn((m, m), |(a, b)| {
        T::lit(0.5 * (inv[(a, b)] + inv[(b, a)]))
    }))
}

/// Preprocessing configuration as read from a TOML/JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub normalization: NormalizationSpec,
    pub binarization: BinarizationStrategy,
    pub filter: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            normalization: NormalizationSpec::default(),
            binarization: BinarizationStrategy::default(),
            filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub id: String,
    pub threshold: Option<f64>,
}

/// Audit artifact: fitted thresholds and the drop list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessAudit {
    pub thresholds: Vec<ThresholdEntry>,
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedVerifier>,
}

impl From<&VoteTensor> for PreprocessAudit {
    fn from(v: &VoteTensor) -> Self {
        Self {
            thresholds: v
                .ids
                .iter()
                .zip(&v.thresholds)
                .map(|(id, t)| ThresholdEntry {
                    id: id.clone(),
                    threshold: *t,
                })
                .collect(),
            kept: v.kept_ids(),
            dropped: v.dropped.clone(),
        }
    }
}
