//! Difficulty-stratified Weaver fits.
//!
//! Queries are binned by their fraction of correct responses (oracle labels)
//! and every bin gets its own thresholds, prior and accuracy fit.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datastore::{DatasetBundle, LabelSet, VerifierKind};
use crate::error::{Error, Result};
use crate::pipeline::{apply_filter, fit_votes, preprocess, resolve_prior, verifier_params, ClusterArtifact, WeaverConfig};
use crate::preprocess::{
    binarize, dev_column, normalize, search_threshold, threshold_grid, BinarizationStrategy, DevObjective,
    Normalized, PreprocessAudit, VoteTensor,
};
use crate::scalar::Real;
use crate::ws::{posteriors, select, FitOutcome, SelectionResult};

/// Fraction of correct responses per query.
pub fn compute_difficulty<T: Real>(labels: &LabelSet) -> Result<Vec<T>> {
    let y = labels.require_full()?;
    let k = T::from_count(y.ncols());
    Ok(y.rows()
        .into_iter()
        .map(|row| T::from_count(row.iter().filter(|&&v| v == 1).count()) / k)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyPartition {
    pub n_clusters: usize,
    /// Cluster id per query; cluster 0 holds the lowest correct fractions.
    pub assignment: Vec<usize>,
    /// Difficulty of the first member of clusters `1..n_clusters`.
    pub boundaries: Vec<f64>,
}

impl DifficultyPartition {
    /// Query indices of `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        self.assignment.iter().for_each(|&c| sizes[c] += 1);
        sizes
    }
}

/// Contiguous equal-size bins over queries sorted by difficulty (ties by
/// query order); the first `n % n_clusters` bins get one extra query.
pub fn partition<T: Real>(difficulties: &[T], n_clusters: usize) -> Result<DifficultyPartition> {
    let n = difficulties.len();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "n_clusters = {n_clusters} must lie in 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| difficulties[a].as_f64().total_cmp(&difficulties[b].as_f64()));
    let base = n / n_clusters;
    let extra = n % n_clusters;
    let mut assignment = vec![0; n];
    let mut boundaries = Vec::with_capacity(n_clusters - 1);
    let mut pos = 0;
    for c in 0..n_clusters {
        let size = base + usize::from(c < extra);
        if c > 0 {
            boundaries.push(difficulties[order[pos]].as_f64());
        }
        for &q in &order[pos..pos + size] {
            assignment[q] = c;
        }
        pos += size;
    }
    Ok(DifficultyPartition {
        n_clusters,
        assignment,
        boundaries,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Thresholds from the configured strategy over the whole dataset.
    #[default]
    Global,
    /// One dev-searched threshold shared by all verifiers of a cluster.
    PerCluster,
    /// One dev-searched threshold per verifier and cluster.
    PerModel,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "per_cluster" => Ok(Self::PerCluster),
            "per_model" => Ok(Self::PerModel),
            other => Err(Error::InvalidArgument(format!("unknown threshold mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterFit<T> {
    pub cluster: usize,
    pub queries: Vec<usize>,
    pub prior: T,
    pub votes: VoteTensor,
    pub fit: FitOutcome<T>,
    pub search_evaluations: usize,
}

impl<T: Real> ClusterFit<T> {
    pub fn artifact(&self) -> ClusterArtifact {
        ClusterArtifact {
            cluster: self.cluster,
            queries: self.queries.len(),
            prior: self.prior.as_f64(),
            verifiers: verifier_params(&self.votes, &self.fit.params),
            audit: PreprocessAudit::from(&self.votes),
            converged: self.fit.converged,
            final_loss: self.fit.final_loss.as_f64(),
            search_evaluations: self.search_evaluations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredRun<T> {
    pub clusters: Vec<ClusterFit<T>>,
    pub posteriors: Array2<T>,
    pub selection: SelectionResult,
}

fn grid_and_objective(strategy: &BinarizationStrategy) -> (Vec<f64>, DevObjective) {
    match strategy {
        BinarizationStrategy::DevAdaptive { grid, objective } => (grid.clone(), *objective),
        _ => (threshold_grid(), DevObjective::Accuracy),
    }
}

fn cluster_votes<T: Real>(
    normalized: &Normalized<T>,
    sub: &DatasetBundle<T>,
    mode: ThresholdMode,
    cfg: &WeaverConfig,
    prior: T,
) -> Result<VoteTensor> {
    let labels = sub.labels.as_ref().filter(|l| !l.dev_queries().is_empty());
    let labels = labels.ok_or_else(|| Error::EmptyDev("cluster has no dev queries".into()))?;
    let (grid, objective) = grid_and_objective(&cfg.preprocess.binarization);
    match mode {
        ThresholdMode::Global => unreachable!("handled by the caller"),
        ThresholdMode::PerModel => {
            let strategy = BinarizationStrategy::DevAdaptive { grid, objective };
            binarize(normalized, &strategy, Some(labels), Some(prior.as_f64()))
        }
        ThresholdMode::PerCluster => {
            let mut scores = Vec::new();
            let mut ys = Vec::new();
            for (kk, meta) in normalized.tensor.verifiers().iter().enumerate() {
                if meta.kind == VerifierKind::BinaryJudge || normalized.degenerate.contains(&kk) {
                    continue;
                }
                let (s, y) = dev_column(&normalized.tensor, labels, kk);
                scores.extend(s);
                ys.extend(y);
            }
            let (threshold, evaluations) = if scores.is_empty() {
                (0.5, 0)
            } else {
                search_threshold(&scores, &ys, &grid, objective)?
            };
            let strategy = BinarizationStrategy::FixedThreshold { threshold };
            let mut votes = binarize(normalized, &strategy, Some(labels), Some(prior.as_f64()))?;
            votes.search_evaluations = evaluations;
            Ok(votes)
        }
    }
}

/// Fits one Weaver model per cluster and merges the selections by query.
///
/// `bundle` should already carry its dev mask. Normalization is always global.
pub fn fit_per_cluster<T: Real>(
    bundle: &DatasetBundle<T>,
    part: &DifficultyPartition,
    mode: ThresholdMode,
    cfg: &WeaverConfig,
) -> Result<ClusteredRun<T>> {
    if part.assignment.len() != bundle.n() {
        return Err(Error::Dimension(format!(
            "partition covers {} queries, bundle has {}",
            part.assignment.len(),
            bundle.n()
        )));
    }
    let global = match mode {
        ThresholdMode::Global => {
            let prior = resolve_prior(bundle, cfg)?;
            Some(preprocess(bundle, &cfg.preprocess, prior)?.1)
        }
        _ => None,
    };
    let normalized = normalize(&bundle.scores, &cfg.preprocess.normalization)?;

    let mut post = Array2::<T>::zeros((bundle.n(), bundle.k()));
    let mut clusters = Vec::with_capacity(part.n_clusters);
    for c in 0..part.n_clusters {
        let queries = part.members(c);
        let sub = bundle.select_queries(&queries);
        let prior = resolve_prior(&sub, cfg)?;
        let raw = match &global {
            Some(votes) => votes.select_queries(&queries),
            None => {
                let sub_norm = Normalized {
                    tensor: normalized.tensor.select_queries(&queries),
                    degenerate: normalized.degenerate.clone(),
                };
                cluster_votes(&sub_norm, &sub, mode, cfg, prior)?
            }
        };
        let search_evaluations = raw.search_evaluations;
        let votes = apply_filter(&raw, &cfg.preprocess, prior.as_f64())?;
        let fit = fit_votes(&votes, prior, &cfg.fit)?;
        let p = posteriors(&votes, &fit.params)?;
        for (row, &q) in queries.iter().enumerate() {
            post.row_mut(q).assign(&p.row(row));
        }
        clusters.push(ClusterFit {
            cluster: c,
            queries,
            prior,
            votes,
            fit,
            search_evaluations,
        });
    }
    let selection = select(post.view());
    Ok(ClusteredRun {
        clusters,
        posteriors: post,
        selection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{ScoreTensor, VerifierMeta};
    use crate::pipeline::{run_weaver, with_dev};
    use ndarray::{array, Array3};

    #[test]
    fn difficulty_examples() {
        let labels = LabelSet::fully_labeled(array![[1u8, 1, 1], [0, 0, 1]]);
        let d: Vec<f64> = compute_difficulty(&labels).unwrap();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
        let mut y = Array2::<u8>::zeros((1, 100));
        y.slice_mut(ndarray::s![0, ..25]).fill(1);
        let d: Vec<f64> = compute_difficulty(&LabelSet::fully_labeled(y)).unwrap();
        assert_eq!(d[0], 0.25);
    }

    #[test]
    fn partition_sizes() {
        let d: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64 / 10.0).collect();
        assert_eq!(partition(&d, 5).unwrap().sizes(), vec![2; 5]);
        assert_eq!(partition(&d, 3).unwrap().sizes(), vec![4, 3, 3]);
        let one = partition(&d, 1).unwrap();
        assert_eq!(one.assignment, vec![0; 10]);
        assert!(one.boundaries.is_empty());
        assert!(partition(&d, 11).is_err());
        assert!(partition(&d, 0).is_err());
    }

    #[test]
    fn partition_is_contiguous_in_difficulty() {
        let d = [0.5, 0.1, 0.9, 0.1, 0.3, 0.7, 0.2];
        let p = partition(&d, 3).unwrap();
        for a in 0..d.len() {
            for b in 0..d.len() {
                if p.assignment[a] < p.assignment[b] {
                    assert!(d[a] <= d[b]);
                }
            }
        }
        // tie at 0.1 broken by query order
        assert!(p.assignment[1] <= p.assignment[3]);
        assert_eq!(p.boundaries.len(), 2);
    }

    fn small_bundle() -> DatasetBundle<f64> {
        let labels = Array2::from_shape_fn((12, 4), |(i, j)| u8::from((i + j) % 3 == 0 || (i < 4 && j == 1)));
        let scores = Array3::from_shape_fn((12, 4, 3), |(i, j, c)| {
            let y = f64::from(labels[[i, j]]);
            let noise = ((i * 31 + j * 17 + c * 7) % 11) as f64 / 11.0;
            0.6 * y + 0.4 * noise
        });
        let metas = (0..3).map(|c| VerifierMeta::new(format!("v{c}"), VerifierKind::ContinuousReward)).collect();
        let tensor = ScoreTensor::new(scores, metas).unwrap();
        let mut l = LabelSet::fully_labeled(labels);
        l.dev_mask = vec![true; 12];
        DatasetBundle::new((0..12).map(|i| format!("q{i:02}")).collect(), tensor, Some(l), "mem").unwrap()
    }

    #[test]
    fn per_model_search_count() {
        let b = small_bundle();
        let cfg = WeaverConfig {
            preprocess: crate::preprocess::PreprocessConfig {
                filter: false,
                ..Default::default()
            },
            ..WeaverConfig::default()
        };
        let d: Vec<f64> = compute_difficulty(b.labels.as_ref().unwrap()).unwrap();
        let part = partition(&d, 2).unwrap();
        let run = fit_per_cluster(&b, &part, ThresholdMode::PerModel, &cfg).unwrap();
        for c in &run.clusters {
            assert_eq!(c.search_evaluations, 19 * 3);
        }
        let run = fit_per_cluster(&b, &part, ThresholdMode::PerCluster, &cfg).unwrap();
        for c in &run.clusters {
            assert_eq!(c.search_evaluations, 19);
            let t: Vec<_> = c.votes.thresholds.iter().flatten().collect();
            assert!(t.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn single_global_cluster_matches_pipeline() {
        let spec = crate::synth::SynthSpec {
            n: 200,
            k: 6,
            m: 5,
            prior: crate::synth::PriorMode::Beta { a: 1.0, b: 1.5 },
            accuracies: crate::synth::AccuracySpec::Uniform { lo: 0.6, hi: 0.9 },
            scores: crate::synth::ScoreMode::continuous(),
            answers: None,
            seed: 8,
        };
        let cfg = WeaverConfig {
            dev_fraction: 0.2,
            ..WeaverConfig::default()
        };
        let b = with_dev(&crate::synth::generate::<f64>(&spec).unwrap(), &cfg).unwrap();
        let d: Vec<f64> = compute_difficulty(b.labels.as_ref().unwrap()).unwrap();
        let run = fit_per_cluster(&b, &partition(&d, 1).unwrap(), ThresholdMode::Global, &cfg).unwrap();
        let flat = run_weaver(&b, &cfg).unwrap();
        assert_eq!(run.selection, flat.selection);
        assert_eq!(run.posteriors, flat.posteriors);
        assert_eq!(run.clusters[0].fit, flat.fit);
    }
}
