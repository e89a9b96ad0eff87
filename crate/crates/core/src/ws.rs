//! Label-free estimation of verifier accuracies and response-correctness posteriors.
//!
//! Votes are modeled as conditionally independent given the latent correctness
//! `Y`. Each kept verifier has a true positive rate `tpr = Pr(S=1 | Y=1)` and a
//! true negative rate `tnr = Pr(S=0 | Y=0)`. These are fitted by matching the
//! model-implied pairwise and marginal vote probabilities to the empirical ones.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::LabelSet;
use crate::error::{Error, Result};
use crate::preprocess::VoteTensor;
use crate::scalar::{logit, sigmoid, Real, PROB_EPS};
use crate::stats::total_cmp;

/// Class prior and per-verifier accuracy pairs, aligned with `VoteTensor::kept`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WSParams<T> {
    pub prior: T,
    pub tpr: Vec<T>,
    pub tnr: Vec<T>,
}

impl<T: Real> WSParams<T> {
    /// Builds parameters, clamping every probability into `[eps, 1 - eps]`.
    pub fn new(prior: T, tpr: Vec<T>, tnr: Vec<T>) -> Result<Self> {
        if tpr.len() != tnr.len() {
            return Err(Error::Dimension(format!(
                "{} tpr entries vs {} tnr entries",
                tpr.len(),
                tnr.len()
            )));
        }
        let eps = T::lit(PROB_EPS);
        Ok(Self {
            prior: prior.clamp_prob(eps),
            tpr: tpr.into_iter().map(|p| p.clamp_prob(eps)).collect(),
            tnr: tnr.into_iter().map(|p| p.clamp_prob(eps)).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.tpr.len()
    }

    /// Row `2k + a`, column `b` holds `Pr(S_k = a | Y = b)`.
    pub fn mu(&self) -> Array2<T> {
        let m = self.m();
        Array2::from_shape_fn((2 * m, 2), |(r, b)| {
            let (k, a) = (r / 2, r % 2);
            cond_prob(self.tpr[k], self.tnr[k], a, b)
        })
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        Self {
            prior: self.prior,
            tpr: cols.iter().map(|&c| self.tpr[c]).collect(),
            tnr: cols.iter().map(|&c| self.tnr[c]).collect(),
        }
    }
}

#[inline]
fn cond_prob<T: Real>(tpr: T, tnr: T, a: usize, b: usize) -> T {
    match (a, b) {
        (0, 0) => tnr,
        (1, 0) => T::one() - tnr,
        (0, _) => T::one() - tpr,
        _ => tpr,
    }
}

/// Empirical second-order vote statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatrices<T> {
    /// `2m x 2m`; diagonal blocks `diag(Pr(S_k=0), Pr(S_k=1))`, off-diagonal
    /// blocks the joint tables `Pr(S_k=a, S_l=c)`.
    pub o: Array2<T>,
}

impl<T: Real> MomentMatrices<T> {
    pub fn m(&self) -> usize {
        self.o.nrows() / 2
    }

    /// `diag([1 - prior, prior])`.
    pub fn prior_matrix(prior: T) -> Array2<T> {
        let mut p = Array2::zeros((2, 2));
        p[[0, 0]] = T::one() - prior;
        p[[1, 1]] = prior;
        p
    }

    fn marginal(&self, k: usize, a: usize) -> T {
        self.o[[2 * k + a, 2 * k + a]]
    }
}

pub fn estimate_moments<T: Real>(votes: &VoteTensor) -> Result<MomentMatrices<T>> {
    estimate_moments_from_rows(votes.rows().view())
}

/// Counts over the rows of an `(rows x m)` 0/1 matrix.
pub fn estimate_moments_from_rows<T: Real>(rows: ArrayView2<u8>) -> Result<MomentMatrices<T>> {
    let (count, m) = rows.dim();
    if count == 0 {
        return Err(Error::DegenerateMoments("no vote rows".into()));
    }
    let mut counts = Array2::<u64>::zeros((2 * m, 2 * m));
    for row in rows.axis_iter(Axis(0)) {
        for k in 0..m {
            let a = row[k] as usize;
            counts[[2 * k + a, 2 * k + a]] += 1;
            for l in (k + 1)..m {
                let c = row[l] as usize;
                counts[[2 * k + a, 2 * l + c]] += 1;
                counts[[2 * l + c, 2 * k + a]] += 1;
            }
        }
    }
    let total = T::from_count(count);
    Ok(MomentMatrices {
        o: counts.mapv(|c| T::from_count(c as usize) / total),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// `tpr = tnr = 0.7` plus seeded `U(-0.05, 0.05)` noise.
    #[default]
    Heuristic,
    /// Agreement rates with the per-row majority vote.
    MajoritySeeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub init: InitStrategy,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iters: 2000,
            tolerance: 1e-9,
            init: InitStrategy::Heuristic,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_iters == 0 || !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fit config needs positive learning_rate, max_iters and tolerance: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FitOutcome<T> {
    pub params: WSParams<T>,
    pub converged: bool,
    pub final_loss: T,
    pub iterations: usize,
    /// Set when the global better-than-random flip was applied.
    pub flipped: bool,
    pub warnings: Vec<String>,
}

/// Moment-matching objective and its gradient with respect to `(tpr, tnr)`.
///
/// `loss = ||O_offdiag - (mu P mu^T)_offdiag||^2 + ||diag(O) - mu P 1||^2`.
pub fn moment_loss<T: Real>(o: &MomentMatrices<T>, prior: T, tpr: &[T], tnr: &[T]) -> (T, Vec<T>, Vec<T>) {
    let m = tpr.len();
    let p = [T::one() - prior, prior];
    let two = T::lit(2.0);
    let mut loss = T::zero();
    // d loss / d mu[k, a, b]
    let mut g = vec![[[T::zero(); 2]; 2]; m];
    let mu = |k: usize, a: usize, b: usize| cond_prob(tpr[k], tnr[k], a, b);

    for k in 0..m {
        for a in 0..2 {
            let model = p[0] * mu(k, a, 0) + p[1] * mu(k, a, 1);
            let r = o.marginal(k, a) - model;
            loss = loss + r * r;
            for b in 0..2 {
                g[k][a][b] = g[k][a][b] - two * r * p[b];
            }
        }
        for l in (k + 1)..m {
            for a in 0..2 {
                for c in 0..2 {
                    let model = p[0] * mu(k, a, 0) * mu(l, c, 0) + p[1] * mu(k, a, 1) * mu(l, c, 1);
                    let r = o.o[[2 * k + a, 2 * l + c]] - model;
                    // (k, l) and (l, k) blocks are mirror images
                    loss = loss + two * r * r;
                    for b in 0..2 {
                        let scale = T::lit(4.0) * r * p[b];
                        g[k][a][b] = g[k][a][b] - scale * mu(l, c, b);
                        g[l][c][b] = g[l][c][b] - scale * mu(k, a, b);
                    }
                }
            }
        }
    }
    let d_tpr = g.iter().map(|gk| gk[1][1] - gk[0][1]).collect();
    let d_tnr = g.iter().map(|gk| gk[0][0] - gk[1][0]).collect();
    (loss, d_tpr, d_tnr)
}

fn heuristic_init<T: Real>(m: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || T::lit(0.7 + rng.random_range(-0.05..0.05));
    let tpr = (0..m).map(|_| draw()).collect();
    let tnr = (0..m).map(|_| draw()).collect();
    (tpr, tnr)
}

/// Agreement of each verifier with the row-wise majority vote (ties count as 0).
pub fn majority_seeded_init<T: Real>(votes: &VoteTensor) -> (Vec<T>, Vec<T>) {
    let rows = votes.rows();
    let m = rows.ncols();
    let (mut agree1, mut n1, mut agree0, mut n0) = (vec![0usize; m], 0usize, vec![0usize; m], 0usize);
    for row in rows.axis_iter(Axis(0)) {
        let ones: usize = row.iter().map(|&v| v as usize).sum();
        let majority = 2 * ones > m;
        if majority {
            n1 += 1;
        } else {
            n0 += 1;
        }
        for k in 0..m {
            match (majority, row[k]) {
                (true, 1) => agree1[k] += 1,
                (false, 0) => agree0[k] += 1,
                _ => {}
            }
        }
    }
    let rate = |hits: usize, total: usize| {
        let r = if total == 0 { 0.7 } else { hits as f64 / total as f64 };
        T::lit(r.clamp(0.05, 0.95))
    };
    (
        agree1.iter().map(|&h| rate(h, n1)).collect(),
        agree0.iter().map(|&h| rate(h, n0)).collect(),
    )
}

/// Fits accuracies from moments with the heuristic initialization.
pub fn fit_accuracies<T: Real>(o: &MomentMatrices<T>, prior: T, cfg: &FitConfig) -> Result<FitOutcome<T>> {
    let (tpr, tnr) = heuristic_init(o.m(), cfg.seed);
    fit_accuracies_from(o, prior, cfg, tpr, tnr)
}

/// Full-batch gradient descent on the logits of `(tpr, tnr)` from a given start.
///
/// After convergence the solution is flipped globally if the mean accuracy is
/// below one half, since the objective cannot tell a labeling from its mirror.
pub fn fit_accuracies_from<T: Real>(
    o: &MomentMatrices<T>,
    prior: T,
    cfg: &FitConfig,
    init_tpr: Vec<T>,
    init_tnr: Vec<T>,
) -> Result<FitOutcome<T>> {
    cfg.check()?;
    let m = o.m();
    if o.o.dim() != (2 * m, 2 * m) || m == 0 {
        return Err(Error::DegenerateMoments(format!("moment matrix has shape {:?}", o.o.dim())));
    }
    if o.o.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateMoments("non-finite entries".into()));
    }
    if !(prior > T::zero() && prior < T::one()) {
        return Err(Error::InvalidArgument(format!("prior must lie in (0, 1), got {prior}")));
    }
    if init_tpr.len() != m || init_tnr.len() != m {
        return Err(Error::Dimension("initial accuracies do not match moment matrix".into()));
    }
    let mut warnings = Vec::new();
    if m < 3 {
        warnings.push(format!(
            "only {m} verifier(s): accuracies are not identifiable from pairwise moments"
        ));
    }

    let eps = T::lit(PROB_EPS);
    let tol = T::lit(cfg.tolerance);
    let mut theta1: Vec<T> = init_tpr.iter().map(|&p| logit(p.clamp_prob(eps))).collect();
    let mut theta0: Vec<T> = init_tnr.iter().map(|&p| logit(p.clamp_prob(eps))).collect();

    let probs = |th: &[T]| th.iter().map(|&t| sigmoid(t).clamp_prob(eps)).collect::<Vec<T>>();
    let mut lr = T::lit(cfg.learning_rate);
    let mut tpr = probs(&theta1);
    let mut tnr = probs(&theta0);
    let (mut loss, mut g1, mut g0) = moment_loss(o, prior, &tpr, &tnr);
    let mut converged = false;
    let mut iterations = 0;

    // Gradient steps with an adaptive rate: a step that raises the loss is
    // undone and the rate halved, an accepted step grows it by 10%.
    while iterations < cfg.max_iters {
        iterations += 1;
        let step1: Vec<T> = (0..m)
            .map(|k| theta1[k] - lr * g1[k] * tpr[k] * (T::one() - tpr[k]))
            .collect();
        let step0: Vec<T> = (0..m)
            .map(|k| theta0[k] - lr * g0[k] * tnr[k] * (T::one() - tnr[k]))
            .collect();
        let (new_tpr, new_tnr) = (probs(&step1), probs(&step0));
        let (new_loss, new_g1, new_g0) = moment_loss(o, prior, &new_tpr, &new_tnr);
        if !(new_loss <= loss) {
            lr = lr / T::lit(2.0);
            if lr < T::lit(1e-12) {
                converged = true;
                break;
            }
            continue;
        }
        let delta = loss - new_loss;
        lr = lr * T::lit(1.1);
        (theta1, theta0, tpr, tnr) = (step1, step0, new_tpr, new_tnr);
        (loss, g1, g0) = (new_loss, new_g1, new_g0);
        if delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("no convergence after {} iterations", cfg.max_iters));
    }
    let final_loss = loss;
    let mean_acc = tpr
        .iter()
        .zip(&tnr)
        .map(|(&a, &b)| (a + b) / T::lit(2.0))
        .sum::<T>()
        / T::from_count(m);
    let flipped = mean_acc < T::lit(0.5);
    if flipped {
        let (old_tpr, old_tnr) = (tpr, tnr);
        tpr = old_tnr.iter().map(|&t| T::one() - t).collect();
        tnr = old_tpr.iter().map(|&t| T::one() - t).collect();
    }
    Ok(FitOutcome {
        params: WSParams::new(prior, tpr, tnr)?,
        converged,
        final_loss,
        iterations,
        flipped,
        warnings,
    })
}

/// Mean label over dev responses, clamped to `[eps, 1 - eps]`.
pub fn estimate_prior<T: Real>(labels: &LabelSet) -> Result<T> {
    let dev = labels.dev_labels();
    if dev.is_empty() {
        return Err(Error::EmptyDev("cannot estimate the class prior".into()));
    }
    let ones = dev.iter().filter(|&&y| y == 1).count();
    Ok((T::from_count(ones) / T::from_count(dev.len())).clamp_prob(T::lit(PROB_EPS)))
}

/// Empirical TPR/TNR and prior over every labeled query.
pub fn fit_supervised<T: Real>(votes: &VoteTensor, labels: &LabelSet) -> Result<WSParams<T>> {
    if labels.n() != votes.n() || labels.k() != votes.k() {
        return Err(Error::Dimension("labels do not match votes".into()));
    }
    let m = votes.m();
    let (mut tp, mut tn) = (vec![0usize; m], vec![0usize; m]);
    let (mut pos, mut neg) = (0usize, 0usize);
    for i in (0..votes.n()).filter(|&i| labels.labeled[i]) {
        for j in 0..votes.k() {
            let y = labels.labels[[i, j]];
            if y == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            for c in 0..m {
                let v = votes.votes[[i, j, c]];
                if y == 1 && v == 1 {
                    tp[c] += 1;
                } else if y == 0 && v == 0 {
                    tn[c] += 1;
                }
            }
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::NoLabels(format!(
            "supervised fit needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    let rate = |hits: usize, total: usize| T::from_count(hits) / T::from_count(total);
    WSParams::new(
        rate(pos, pos + neg),
        tp.iter().map(|&h| rate(h, pos)).collect(),
        tn.iter().map(|&h| rate(h, neg)).collect(),
    )
}

/// `Pr(Y = 1 | votes)` with the model-implied (self-normalizing) denominator,
/// computed in log space.
pub fn posterior<T: Real>(votes: &[u8], params: &WSParams<T>) -> Result<T> {
    if votes.len() != params.m() {
        return Err(Error::Dimension(format!(
            "vote row has {} entries, params cover {} verifiers",
            votes.len(),
            params.m()
        )));
    }
    let eps = T::lit(PROB_EPS);
    let prior = params.prior.clamp_prob(eps);
    let mut log1 = prior.ln();
    let mut log0 = (T::one() - prior).ln();
    for (k, &v) in votes.iter().enumerate() {
        let a = usize::from(v != 0);
        let (tpr, tnr) = (params.tpr[k].clamp_prob(eps), params.tnr[k].clamp_prob(eps));
        log1 = log1 + cond_prob(tpr, tnr, a, 1).ln();
        log0 = log0 + cond_prob(tpr, tnr, a, 0).ln();
    }
    // sigmoid of the log-odds is the normalized posterior
    Ok(sigmoid(log1 - log0))
}

/// Posterior for every `(query, response)`, shape `(n, K)`.
pub fn posteriors<T: Real>(votes: &VoteTensor, params: &WSParams<T>) -> Result<Array2<T>> {
    let (n, k, _) = votes.votes.dim();
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let row: Vec<u8> = votes.votes.slice(ndarray::s![i, j, ..]).to_vec();
            out[[i, j]] = posterior(&row, params)?;
        }
    }
    Ok(out)
}

/// Chosen response index per query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: Vec<usize>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }
}

/// Index of the largest value, ties to the smallest index.
pub(crate) fn argmax_first<T: Real>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best_idx = 0;
    let mut best: Option<T> = None;
    for (j, v) in values.into_iter().enumerate() {
        match best {
            Some(b) if total_cmp(&v, &b) != std::cmp::Ordering::Greater => {}
            _ => {
                best = Some(v);
                best_idx = j;
            }
        }
    }
    best_idx
}

/// `j* = argmax_j posterior[i, j]`, ties broken toward the first-generated response.
pub fn select<T: Real>(posteriors: ArrayView2<T>) -> SelectionResult {
    SelectionResult {
        chosen: posteriors
            .axis_iter(Axis(0))
            .map(|row| argmax_first(row.iter().copied()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudolabelRecord {
    pub query_id: String,
    pub response_index: usize,
    pub posterior: f64,
}

/// One JSONL record per `(query, response)` in `(query_id, response_index)` order.
pub fn export_pseudolabels<T: Real, W: Write>(posteriors: ArrayView2<T>, query_ids: &[String], mut out: W) -> Result<()> {
    if posteriors.nrows() != query_ids.len() {
        return Err(Error::Dimension("posterior rows do not match query ids".into()));
    }
    let mut order: Vec<usize> = (0..query_ids.len()).collect();
    order.sort_by(|&a, &b| query_ids[a].cmp(&query_ids[b]));
    for i in order {
        for (j, &p) in posteriors.row(i).iter().enumerate() {
            let rec = PseudolabelRecord {
                query_id: query_ids[i].clone(),
                response_index: j,
                posterior: p.as_f64().clamp(0.0, 1.0),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("pseudolabels", e))?;
        }
    }
    Ok(())
}

pub fn read_pseudolabels<R: BufRead>(reader: R) -> Result<Vec<PseudolabelRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("pseudolabels", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
