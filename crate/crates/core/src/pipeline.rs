//! End-to-end Weaver selection and the strategy dispatch used by evaluation.

use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, FeatureKind, LogRegConfig};
use crate::datastore::{split_dev, DatasetBundle, LabelSet};
use crate::error::{Error, Result};
use crate::evaluation::oracle_select;
use crate::preprocess::{
    binarize, drop_constant_verifiers, filter_verifiers, normalize, Normalized, PreprocessAudit, PreprocessConfig,
    VoteTensor,
};
use crate::scalar::Real;
use crate::ws::{
    estimate_moments, estimate_prior, fit_accuracies, fit_accuracies_from, fit_supervised, majority_seeded_init,
    posteriors, select, FitConfig, FitOutcome, InitStrategy, SelectionResult, WSParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeaverConfig {
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
    /// Used only when the bundle carries no dev mask yet.
    pub dev_fraction: f64,
    /// Seed for the dev split.
    pub seed: u64,
    /// Fixed class prior; when absent it is estimated from dev labels.
    pub prior: Option<f64>,
}

impl Default for WeaverConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            fit: FitConfig::default(),
            dev_fraction: 0.01,
            seed: 0,
            prior: None,
        }
    }
}

/// Returns a bundle whose labels carry a dev mask, splitting one off if the
/// input has none. Unlabeled bundles pass through unchanged.
pub fn with_dev<T: Real>(bundle: &DatasetBundle<T>, cfg: &WeaverConfig) -> Result<DatasetBundle<T>> {
    match &bundle.labels {
        Some(l) if l.has_any_labels() && l.dev_queries().is_empty() => {
            let mut out = bundle.clone();
            out.labels = Some(split_dev(bundle, cfg.dev_fraction, cfg.seed)?);
            Ok(out)
        }
        _ => Ok(bundle.clone()),
    }
}

fn dev_labels<T: Real>(bundle: &DatasetBundle<T>) -> Option<&LabelSet> {
    bundle.labels.as_ref().filter(|l| !l.dev_queries().is_empty())
}

/// Class prior from the config override or the dev labels.
pub fn resolve_prior<T: Real>(bundle: &DatasetBundle<T>, cfg: &WeaverConfig) -> Result<T> {
    match (cfg.prior, dev_labels(bundle)) {
        (Some(p), _) if p > 0.0 && p < 1.0 => Ok(T::lit(p)),
        (Some(p), _) => Err(Error::InvalidArgument(format!("prior must lie in (0, 1), got {p}"))),
        (None, Some(labels)) => estimate_prior(labels),
        (None, None) => Err(Error::NoLabels("a class prior needs dev labels or an explicit prior".into())),
    }
}

/// Normalized scores and unfiltered votes for the whole bundle.
pub fn preprocess<T: Real>(
    bundle: &DatasetBundle<T>,
    cfg: &PreprocessConfig,
    prior: T,
) -> Result<(Normalized<T>, VoteTensor)> {
    let normalized = normalize(&bundle.scores, &cfg.normalization)?;
    let votes = binarize(&normalized, &cfg.binarization, dev_labels(bundle), Some(prior.as_f64()))?;
    Ok((normalized, votes))
}

/// Marginal filtering if enabled, else only constant columns are dropped.
pub fn apply_filter(votes: &VoteTensor, cfg: &PreprocessConfig, prior: f64) -> Result<VoteTensor> {
    if cfg.filter {
        filter_verifiers(votes, prior)
    } else {
        drop_constant_verifiers(votes)
    }
}

/// Moment-matched accuracies on already filtered votes.
pub fn fit_votes<T: Real>(votes: &VoteTensor, prior: T, cfg: &FitConfig) -> Result<FitOutcome<T>> {
    let moments = estimate_moments::<T>(votes)?;
    match cfg.init {
        InitStrategy::Heuristic => fit_accuracies(&moments, prior, cfg),
        InitStrategy::MajoritySeeded => {
            let (tpr, tnr) = majority_seeded_init(votes);
            fit_accuracies_from(&moments, prior, cfg, tpr, tnr)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeaverRun<T> {
    pub prior: T,
    /// Filtered votes; `kept` maps columns back to bundle verifiers.
    pub votes: VoteTensor,
    pub fit: FitOutcome<T>,
    pub posteriors: Array2<T>,
    pub selection: SelectionResult,
}

/// normalize, binarize, filter, estimate the prior, fit, score and select.
/// The bundle should already carry its dev mask (see [`with_dev`]).
pub fn run_weaver<T: Real>(bundle: &DatasetBundle<T>, cfg: &WeaverConfig) -> Result<WeaverRun<T>> {
    let prior = resolve_prior(bundle, cfg)?;
    let (_, raw_votes) = preprocess(bundle, &cfg.preprocess, prior)?;
    let votes = apply_filter(&raw_votes, &cfg.preprocess, prior.as_f64())?;
    let fit = fit_votes(&votes, prior, &cfg.fit)?;
    let posteriors = posteriors(&votes, &fit.params)?;
    let selection = select(posteriors.view());
    Ok(WeaverRun {
        prior,
        votes,
        fit,
        posteriors,
        selection,
    })
}

/// Posteriors for `votes` (unfiltered, all bundle verifiers) under parameters
/// keyed by verifier id.
pub fn apply_params<T: Real>(votes: &VoteTensor, ids: &[String], params: &WSParams<T>) -> Result<Array2<T>> {
    let cols = ids
        .iter()
        .map(|id| {
            votes
                .kept
                .iter()
                .position(|&orig| &votes.ids[orig] == id)
                .ok_or_else(|| Error::InvalidArgument(format!("verifier '{id}' missing from dataset")))
        })
        .collect::<Result<Vec<_>>>()?;
    let sub = VoteTensor {
        votes: votes.votes.select(Axis(2), &cols),
        kept: cols.iter().map(|&c| votes.kept[c]).collect(),
        ..votes.clone()
    };
    posteriors(&sub, params)
}

/// Selection strategies runnable from the command line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Weaver,
    Oracle,
    First,
    Majority,
    Naive,
    /// Naive ensemble over the `k` best single verifiers (uses labels).
    TopK(usize),
    /// Conditionally independent votes with accuracies counted on dev.
    NaiveBayes,
    /// Logistic regression on normalized scores, trained on dev responses.
    Logreg,
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Weaver => "weaver".into(),
            Strategy::Oracle => "oracle".into(),
            Strategy::First => "first".into(),
            Strategy::Majority => "majority".into(),
            Strategy::Naive => "naive".into(),
            Strategy::TopK(k) => format!("top{k}"),
            Strategy::NaiveBayes => "naive_bayes".into(),
            Strategy::Logreg => "logreg".into(),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "weaver" => Strategy::Weaver,
            "oracle" => Strategy::Oracle,
            "first" | "first_sample" => Strategy::First,
            "majority" | "majority_vote" => Strategy::Majority,
            "naive" | "naive_ensemble" => Strategy::Naive,
            "naive_bayes" | "nb" => Strategy::NaiveBayes,
            "logreg" | "logistic_regression" => Strategy::Logreg,
            other => match other.strip_prefix("top").map(str::parse::<usize>) {
                Some(Ok(k)) if k > 0 => Strategy::TopK(k),
                _ => return Err(Error::InvalidArgument(format!("unknown strategy '{other}'"))),
            },
        })
    }
}

fn dev_only(labels: &LabelSet) -> LabelSet {
    let mut out = labels.clone();
    out.labeled = labels.dev_mask.clone();
    out
}

/// Runs `strategy` on a bundle that already carries its dev mask.
pub fn run_strategy<T: Real>(strategy: &Strategy, bundle: &DatasetBundle<T>, cfg: &WeaverConfig) -> Result<SelectionResult> {
    match strategy {
        Strategy::Weaver => Ok(run_weaver(bundle, cfg)?.selection),
        Strategy::Oracle => Ok(oracle_select(bundle.require_labels()?.require_full()?.view())),
        Strategy::First => Ok(baselines::first_sample(bundle.n())),
        Strategy::Majority => baselines::majority_vote_opt(bundle.labels.as_ref().and_then(|l| l.answers.as_ref())),
        Strategy::Naive => {
            let normalized = normalize(&bundle.scores, &cfg.preprocess.normalization)?;
            Ok(baselines::naive_ensemble(&normalized.tensor))
        }
        Strategy::TopK(k) => {
            let normalized = normalize(&bundle.scores, &cfg.preprocess.normalization)?;
            let labels = bundle.require_labels()?.require_full()?;
            baselines::top_k_oracle_ensemble(&normalized.tensor, labels.view(), *k)
        }
        Strategy::NaiveBayes => {
            let labels = dev_labels(bundle).ok_or_else(|| Error::EmptyDev("naive Bayes needs dev labels".into()))?;
            let prior = resolve_prior(bundle, cfg)?;
            let (_, raw) = preprocess(bundle, &cfg.preprocess, prior)?;
            let votes = apply_filter(&raw, &cfg.preprocess, prior.as_f64())?;
            let params: WSParams<T> = fit_supervised(&votes, &dev_only(labels))?;
            Ok(select(posteriors(&votes, &params)?.view()))
        }
        Strategy::Logreg => {
            let labels = dev_labels(bundle).ok_or_else(|| Error::EmptyDev("logistic regression needs dev labels".into()))?;
            let normalized = normalize(&bundle.scores, &cfg.preprocess.normalization)?;
            let features = normalized.tensor.as_rows();
            let k = bundle.k();
            let dev_rows: Vec<usize> = labels.dev_queries().iter().flat_map(|&i| (i * k)..(i * k + k)).collect();
            let train_x = features.select(Axis(0), &dev_rows);
            let train_y: Vec<u8> = dev_rows.iter().map(|&r| labels.labels[[r / k, r % k]]).collect();
            let lr_cfg = LogRegConfig {
                seed: cfg.seed,
                ..LogRegConfig::default()
            };
            let fit = baselines::logreg_fit(train_x.view(), &train_y, FeatureKind::Continuous, &lr_cfg)?;
            let scores = baselines::logreg_predict(&fit.model, features.view())?;
            let grid = Array2::from_shape_vec((bundle.n(), k), scores).map_err(|e| Error::Dimension(e.to_string()))?;
            Ok(select(grid.view()))
        }
    }
}

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn json_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierParams {
    pub id: String,
    pub tpr: f64,
    pub tnr: f64,
}

/// Per-cluster parameters inside a fit artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub cluster: usize,
    pub queries: usize,
    pub prior: f64,
    pub verifiers: Vec<VerifierParams>,
    pub audit: PreprocessAudit,
    pub converged: bool,
    pub final_loss: f64,
    pub search_evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub prior: f64,
    pub verifiers: Vec<VerifierParams>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub dataset_hash: String,
    pub converged: bool,
    pub final_loss: f64,
    pub iterations: usize,
    pub flipped: bool,
    pub warnings: Vec<String>,
    pub audit: PreprocessAudit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<Vec<ClusterArtifact>>,
}

pub fn verifier_params<T: Real>(votes: &VoteTensor, params: &WSParams<T>) -> Vec<VerifierParams> {
    votes
        .kept_ids()
        .into_iter()
        .zip(params.tpr.iter().zip(&params.tnr))
        .map(|(id, (&tpr, &tnr))| VerifierParams {
            id,
            tpr: tpr.as_f64(),
            tnr: tnr.as_f64(),
        })
        .collect()
}

impl FitArtifact {
    pub fn from_run<T: Real, C: Serialize>(run: &WeaverRun<T>, config: &C, dataset_hash: &str) -> Result<Self> {
        Ok(Self {
            prior: run.prior.as_f64(),
            verifiers: verifier_params(&run.votes, &run.fit.params),
            config: serde_json::to_value(config)?,
            config_hash: json_hash(config)?,
            dataset_hash: dataset_hash.to_string(),
            converged: run.fit.converged,
            final_loss: run.fit.final_loss.as_f64(),
            iterations: run.fit.iterations,
            flipped: run.fit.flipped,
            warnings: run.fit.warnings.clone(),
            audit: PreprocessAudit::from(&run.votes),
            clusters: None,
        })
    }

    /// Parameters of the global fit.
    pub fn params<T: Real>(&self) -> Result<(Vec<String>, WSParams<T>)> {
        params_from(self.prior, &self.verifiers)
    }
}

pub fn params_from<T: Real>(prior: f64, verifiers: &[VerifierParams]) -> Result<(Vec<String>, WSParams<T>)> {
    let ids = verifiers.iter().map(|v| v.id.clone()).collect();
    let params = WSParams::new(
        T::lit(prior),
        verifiers.iter().map(|v| T::lit(v.tpr)).collect(),
        verifiers.iter().map(|v| T::lit(v.tnr)).collect(),
    )?;
    Ok((ids, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::success_rate;
    use crate::synth::{generate, AccuracySpec, AnswerSpec, PriorMode, ScoreMode, SynthSpec};

    fn bundle(seed: u64) -> DatasetBundle<f64> {
        let spec = SynthSpec {
            n: 300,
            k: 8,
            m: 6,
            prior: PriorMode::Fixed { pi: 0.4 },
            accuracies: AccuracySpec::Uniform { lo: 0.6, hi: 0.9 },
            scores: ScoreMode::continuous(),
            answers: Some(AnswerSpec { wrong_answers: 4 }),
            seed,
        };
        generate(&spec).unwrap()
    }

    fn cfg() -> WeaverConfig {
        WeaverConfig {
            dev_fraction: 0.1,
            seed: 3,
            ..WeaverConfig::default()
        }
    }

    #[test]
    fn weaver_runs_and_converges() {
        let b = with_dev(&bundle(1), &cfg()).unwrap();
        let run = run_weaver(&b, &cfg()).unwrap();
        assert!(run.fit.converged);
        assert_eq!(run.selection.len(), 300);
        assert!(run.posteriors.iter().all(|&p| p > 0.0 && p < 1.0));
        let again = run_weaver(&b, &cfg()).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn every_strategy_selects_in_range() {
        let c = cfg();
        let b = with_dev(&bundle(2), &c).unwrap();
        let labels = b.labels.as_ref().unwrap().labels.clone();
        for name in ["weaver", "oracle", "first", "majority", "naive", "top2", "naive_bayes", "logreg"] {
            let s: Strategy = name.parse().unwrap();
            assert_eq!(s.name(), name);
            let sel = run_strategy(&s, &b, &c).unwrap();
            assert!(sel.chosen.iter().all(|&j| j < b.k()), "{name}");
            let rate: f64 = success_rate(&sel, labels.view()).unwrap();
            assert!((0.0..=1.0).contains(&rate));
        }
        assert!("top0".parse::<Strategy>().is_err());
        assert!("bogus".parse::<Strategy>().is_err());
    }

    #[test]
    fn artifact_params_reproduce_posteriors() {
        let c = cfg();
        let b = with_dev(&bundle(4), &c).unwrap();
        let run = run_weaver(&b, &c).unwrap();
        let art = FitArtifact::from_run(&run, &c, &b.provenance.content_hash).unwrap();
        let (ids, params) = art.params::<f64>().unwrap();
        let prior = resolve_prior::<f64>(&b, &c).unwrap();
        let (_, raw) = preprocess(&b, &c.preprocess, prior).unwrap();
        let post = apply_params(&raw, &ids, &params).unwrap();
        assert_eq!(post, run.posteriors);
        assert_eq!(art.config_hash, json_hash(&c).unwrap());
    }

    #[test]
    fn unlabeled_bundle_needs_prior() {
        let mut b = bundle(5);
        b.labels = None;
        let mut c = cfg();
        c.preprocess.binarization = crate::preprocess::BinarizationStrategy::FixedThreshold { threshold: 0.5 };
        assert!(run_weaver(&b, &c).is_err());
        c.prior = Some(0.4);
        assert!(run_weaver(&b, &c).is_ok());
    }
}
