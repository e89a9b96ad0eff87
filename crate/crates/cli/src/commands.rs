use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use weaver_core::clustering::{compute_difficulty, fit_per_cluster, partition, ThresholdMode};
use weaver_core::datastore::{load_dataset_with_manifest, ValidationReport, VerifierManifest};
use weaver_core::evaluation::{
    best_of_k_monte_carlo, generation_verification_gap, per_verifier_diagnostics, PassAtK, StrategyMetrics,
};
use weaver_core::pipeline::{
    apply_params, json_hash, preprocess, run_strategy, with_dev, FitArtifact,
};
use weaver_core::preprocess::threshold_grid;
use weaver_core::scaling::{fit_curve, read_curve_csv};
use weaver_core::synth::{generate, SynthSpec};
use weaver_core::ws::{self, export_pseudolabels, InitStrategy};
use weaver_core::{
    load_dataset, pass_at_k, run_weaver, save_dataset, success_rate, validate, BinarizationStrategy, CurveForm,
    DataFormat, DatasetBundle, Error, MetricsReport, Result, ScalingFit, SelectionResult, Strategy,
};

use crate::config::RunConfig;
use crate::{DataArgs, RunArgs};

type Bundle = DatasetBundle<f64>;

fn write_bytes(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Error::io(path, e)),
        None => std::io::stdout()
            .lock()
            .write_all(bytes)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn write_json<S: Serialize>(out: Option<&Path>, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(out, text.as_bytes())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load(data: &DataArgs) -> Result<Bundle> {
    let format = data.format.unwrap_or_else(|| DataFormat::from_path(&data.data));
    match &data.manifest {
        Some(m) => load_dataset_with_manifest(&data.data, format, Some(VerifierManifest::read(m)?)),
        None => load_dataset(&data.data, format),
    }
}

pub fn parse_init(s: &str) -> Result<InitStrategy> {
    match s {
        "heuristic" => Ok(InitStrategy::Heuristic),
        "majority_seeded" => Ok(InitStrategy::MajoritySeeded),
        other => Err(Error::InvalidArgument(format!("unknown init strategy '{other}'"))),
    }
}

fn parse_binarization(name: &str, threshold: Option<f64>) -> Result<BinarizationStrategy> {
    Ok(match name {
        "fixed" | "fixed_threshold" => BinarizationStrategy::FixedThreshold {
            threshold: threshold.unwrap_or(0.5),
        },
        "dev_adaptive" => BinarizationStrategy::DevAdaptive {
            grid: threshold_grid(),
            objective: Default::default(),
        },
        "class_balance" => BinarizationStrategy::ClassBalance,
        "quantile" => match threshold {
            Some(q) => BinarizationStrategy::Quantile { q },
            None => return Err(Error::InvalidArgument("quantile binarization needs --threshold".into())),
        },
        other => return Err(Error::InvalidArgument(format!("unknown binarization '{other}'"))),
    })
}

fn parse_list<V: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<V>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} '{t}'")))
        })
        .collect()
}

/// Config file first, then flags on top.
fn resolve_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(run.config.as_deref())?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(f) = run.dev_fraction {
        cfg.dev_fraction = f;
    }
    if run.prior.is_some() {
        cfg.prior = run.prior;
    }
    match (&run.binarization, run.threshold) {
        (Some(name), t) => cfg.preprocess.binarization = parse_binarization(name, t)?,
        (None, Some(t)) => match &mut cfg.preprocess.binarization {
            BinarizationStrategy::FixedThreshold { threshold } => *threshold = t,
            BinarizationStrategy::Quantile { q } => *q = t,
            _ => {
                return Err(Error::InvalidArgument(
                    "--threshold applies only to fixed or quantile binarization".into(),
                ))
            }
        },
        (None, None) => {}
    }
    if run.no_filter {
        cfg.preprocess.filter = false;
    }
    if let Some(p) = run.lo_percentile {
        cfg.preprocess.normalization.lo_percentile = p;
    }
    if let Some(p) = run.hi_percentile {
        cfg.preprocess.normalization.hi_percentile = p;
    }
    if let Some(i) = &run.init {
        cfg.fit.init = parse_init(i)?;
    }
    if let Some(lr) = run.learning_rate {
        cfg.fit.learning_rate = lr;
    }
    if let Some(it) = run.max_iters {
        cfg.fit.max_iters = it;
    }
    if let Some(c) = run.clusters {
        cfg.clusters.n_clusters = c;
    }
    if let Some(m) = run.threshold_mode {
        cfg.clusters.threshold_mode = m;
    }
    Ok(cfg)
}

fn is_clustered(cfg: &RunConfig) -> bool {
    cfg.clusters.n_clusters > 1 || cfg.clusters.threshold_mode != ThresholdMode::Global
}

#[derive(Serialize)]
struct IngestReport<'a> {
    dataset_hash: &'a str,
    #[serde(flatten)]
    report: ValidationReport,
}

pub fn ingest(data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let bundle = load(data)?;
    let report = IngestReport {
        dataset_hash: &bundle.provenance.content_hash,
        report: validate(&bundle),
    };
    write_json(out, &report)
}

fn fit_artifact(bundle: &Bundle, cfg: &RunConfig) -> Result<FitArtifact> {
    let wcfg = cfg.weaver();
    let b = with_dev(bundle, &wcfg)?;
    let global = run_weaver(&b, &wcfg)?;
    let mut artifact = FitArtifact::from_run(&global, cfg, &bundle.provenance.content_hash)?;
    if is_clustered(cfg) {
        let labels = b.require_labels()?;
        let part = partition(&compute_difficulty::<f64>(labels)?, cfg.clusters.n_clusters)?;
        let run = fit_per_cluster(&b, &part, cfg.clusters.threshold_mode, &wcfg)?;
        artifact.clusters = Some(run.clusters.iter().map(|c| c.artifact()).collect());
    }
    Ok(artifact)
}

pub fn fit(data: &DataArgs, run: &RunArgs, out: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(run)?;
    let bundle = load(data)?;
    write_json(out, &fit_artifact(&bundle, &cfg)?)
}

/// Posteriors for `bundle` under a stored fit. Votes are rebuilt with the
/// artifact's preprocessing config; clustered fits are re-derived per cluster
/// because cluster membership depends on the data.
fn posteriors_from_artifact(bundle: &Bundle, artifact: &FitArtifact) -> Result<Array2<f64>> {
    let cfg: RunConfig = serde_json::from_value(artifact.config.clone())?;
    let wcfg = cfg.weaver();
    let b = with_dev(bundle, &wcfg)?;
    if artifact.clusters.is_some() {
        let labels = b.require_labels()?;
        let part = partition(&compute_difficulty::<f64>(labels)?, cfg.clusters.n_clusters)?;
        return Ok(fit_per_cluster(&b, &part, cfg.clusters.threshold_mode, &wcfg)?.posteriors);
    }
    let (_, votes) = preprocess(&b, &wcfg.preprocess, artifact.prior)?;
    let (ids, params) = artifact.params::<f64>()?;
    apply_params(&votes, &ids, &params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedResponse {
    pub query_id: String,
    pub response_index: usize,
    pub posterior: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub config_hash: String,
    pub dataset_hash: String,
    pub fit_hash: String,
    pub selections: Vec<SelectedResponse>,
}

pub fn select(data: &DataArgs, fit: &Path, out: Option<&Path>) -> Result<()> {
    let bundle = load(data)?;
    let artifact: FitArtifact = read_json(fit)?;
    let post = posteriors_from_artifact(&bundle, &artifact)?;
    let chosen = ws::select(post.view());
    let selections = bundle
        .query_ids
        .iter()
        .zip(&chosen.chosen)
        .enumerate()
        .map(|(i, (q, &j))| SelectedResponse {
            query_id: q.clone(),
            response_index: j,
            posterior: post[[i, j]],
        })
        .collect();
    write_json(
        out,
        &SelectionArtifact {
            config_hash: artifact.config_hash.clone(),
            dataset_hash: bundle.provenance.content_hash.clone(),
            fit_hash: json_hash(&artifact)?,
            selections,
        },
    )
}

pub struct EvalFlags {
    pub strategies: Option<String>,
    pub k: Option<String>,
    pub trials: Option<usize>,
    pub exclude_dev: bool,
    pub selection: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalArtifact {
    config: RunConfig,
    config_hash: String,
    dataset_hash: String,
    #[serde(flatten)]
    report: MetricsReport,
}

/// Selection from a `weaver select` artifact, aligned to bundle order.
fn selection_from_file(bundle: &Bundle, path: &Path) -> Result<SelectionResult> {
    let artifact: SelectionArtifact = read_json(path)?;
    let by_id: std::collections::HashMap<&str, usize> = artifact
        .selections
        .iter()
        .map(|s| (s.query_id.as_str(), s.response_index))
        .collect();
    let chosen = bundle
        .query_ids
        .iter()
        .map(|q| {
            by_id
                .get(q.as_str())
                .copied()
                .filter(|&j| j < bundle.k())
                .ok_or_else(|| Error::InvalidArgument(format!("selection has no valid entry for query '{q}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionResult { chosen })
}

pub fn eval(data: &DataArgs, run: &RunArgs, flags: EvalFlags, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let mut cfg = resolve_config(run)?;
    if let Some(s) = &flags.strategies {
        cfg.strategies = parse_list::<String>(s, "strategy")?;
    }
    if let Some(k) = &flags.k {
        cfg.ks = parse_list(k, "k")?;
    }
    if let Some(t) = flags.trials {
        cfg.trials = t;
    }
    cfg.exclude_dev |= flags.exclude_dev;
    let strategies = cfg
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>>>()?;

    let bundle = load(data)?;
    let wcfg = cfg.weaver();
    let b = with_dev(&bundle, &wcfg)?;
    let labels = b.require_labels()?;
    let full = labels.require_full()?;

    let rows: Vec<usize> = if cfg.exclude_dev {
        (0..b.n()).filter(|&i| !labels.dev_mask[i]).collect()
    } else {
        (0..b.n()).collect()
    };
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no queries left to evaluate".into()));
    }
    let eval_labels = full.select(Axis(0), &rows);
    let restrict = |s: &SelectionResult| SelectionResult {
        chosen: rows.iter().map(|&i| s.chosen[i]).collect(),
    };

    let mut notes = Vec::new();
    let pass_k_total: f64 = pass_at_k(eval_labels.view(), b.k())?;
    let pass_at_k_rows = cfg
        .ks
        .iter()
        .map(|&k| {
            Ok(PassAtK {
                k,
                value: pass_at_k(eval_labels.view(), k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let weaver_run = if strategies.contains(&Strategy::Weaver) {
        let r = run_weaver(&b, &wcfg)?;
        notes.extend(r.fit.warnings.iter().map(|w| format!("weaver: {w}")));
        Some(r)
    } else {
        None
    };

    let mut metrics = Vec::new();
    let mut score = |name: String, sel: &SelectionResult, best_of_k: Vec<PassAtK>| -> Result<()> {
        let success: f64 = success_rate(&restrict(sel), eval_labels.view())?;
        metrics.push(StrategyMetrics {
            strategy: name,
            success_rate: success,
            gap: generation_verification_gap(pass_k_total, success),
            best_of_k,
        });
        Ok(())
    };
    for strategy in &strategies {
        let sel = match (strategy, &weaver_run) {
            (Strategy::Weaver, Some(r)) => r.selection.clone(),
            _ => run_strategy(strategy, &b, &wcfg)?,
        };
        let mut best = Vec::new();
        if cfg.trials > 0 {
            for &k in cfg.ks.iter().filter(|&&k| k < b.k()) {
                let value = best_of_k_monte_carlo(|sub| run_strategy(strategy, sub, &wcfg), &b, k, cfg.trials, cfg.seed)?;
                best.push(PassAtK { k, value });
            }
        }
        score(strategy.name(), &sel, best)?;
    }
    if let Some(path) = &flags.selection {
        score("selection".into(), &selection_from_file(&b, path)?, Vec::new())?;
    }
    if cfg.exclude_dev && cfg.trials > 0 {
        notes.push("best_of_k covers every query, including dev".into());
    }

    let sub_scores = b.scores.select_queries(&rows);
    let sub_votes = weaver_run.as_ref().map(|r| r.votes.select_queries(&rows));
    let per_verifier = per_verifier_diagnostics(&sub_scores, sub_votes.as_ref(), eval_labels.view())?;

    let report = MetricsReport {
        pass_at_k: pass_at_k_rows,
        strategies: metrics,
        per_verifier: Some(per_verifier),
        notes,
    };
    if let Some(path) = csv {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        report.write_csv(BufWriter::new(file))?;
    }
    write_json(
        out,
        &EvalArtifact {
            config_hash: json_hash(&cfg)?,
            dataset_hash: bundle.provenance.content_hash.clone(),
            config: cfg,
            report,
        },
    )
}

#[derive(Serialize)]
struct ScalingArtifact {
    config_hash: String,
    dataset_hash: String,
    #[serde(flatten)]
    fit: ScalingFit<f64>,
}

pub fn scaling_fit(input: &Path, form: CurveForm, out: Option<&Path>) -> Result<()> {
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let points = read_curve_csv::<f64, _>(file)?;
    let fit = fit_curve(&points, form)?;
    write_json(
        out,
        &ScalingArtifact {
            config_hash: json_hash(&form)?,
            dataset_hash: json_hash(&points)?,
            fit,
        },
    )
}

pub fn synth(spec_path: &Path, out: &Path, truth: Option<&Path>, format: Option<DataFormat>) -> Result<()> {
    let spec: SynthSpec = read_json(spec_path)?;
    let bundle: Bundle = generate(&spec)?;
    save_dataset(&bundle, out, format.unwrap_or_else(|| DataFormat::from_path(out)))?;
    let truth_path = match truth {
        Some(p) => p.to_path_buf(),
        None => out.with_file_name("truth.json"),
    };
    let value = serde_json::json!({
        "config_hash": json_hash(&spec)?,
        "dataset_hash": bundle.provenance.content_hash,
        "spec": spec,
        "truth": bundle.provenance.truth,
    });
    write_json(Some(&truth_path), &value)
}

pub fn export_distill(data: &DataArgs, fit: &Path, out: Option<&Path>) -> Result<()> {
    let bundle = load(data)?;
    let artifact: FitArtifact = read_json(fit)?;
    let post = posteriors_from_artifact(&bundle, &artifact)?;
    let mut buf = Vec::new();
    export_pseudolabels(post.view(), &bundle.query_ids, &mut buf)?;
    write_bytes(out, &buf)
}
