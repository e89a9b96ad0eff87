use ndarray::{concatenate, Array2, Axis};
use weaver_core::baselines::{logreg_fit, logreg_predict, train_holdout_split, FeatureKind, LogRegConfig};
use weaver_core::clustering::{compute_difficulty, fit_per_cluster, partition, ThresholdMode};
use weaver_core::pipeline::{run_weaver, with_dev};
use weaver_core::synth::{generate, AccuracySpec, PriorMode, ScoreMode, SynthSpec};
use weaver_core::ws::{estimate_moments, fit_accuracies, FitConfig};
use weaver_core::{success_rate, DatasetBundle, LabelSet, ScoreTensor, SelectionResult, WeaverConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn spec(n: usize, pi: f64, tpr: Vec<f64>, tnr: Vec<f64>, seed: u64) -> SynthSpec {
    SynthSpec {
        n,
        k: 10,
        m: tpr.len(),
        prior: PriorMode::Fixed { pi },
        accuracies: AccuracySpec::Explicit { tpr, tnr },
        scores: ScoreMode::Discrete,
        answers: None,
        seed,
    }
}

#[test]
fn perfect_verifiers_are_recovered_exactly() {
    let b: DatasetBundle<f64> = generate(&spec(400, 0.35, vec![1.0; 4], vec![1.0; 4], 2)).unwrap();
    let cfg = WeaverConfig {
        dev_fraction: 0.1,
        ..WeaverConfig::default()
    };
    let run = run_weaver(&with_dev(&b, &cfg).unwrap(), &cfg).unwrap();
    let labels = &b.labels.as_ref().unwrap().labels;
    let s: f64 = success_rate(&run.selection, labels.view()).unwrap();
    let oracle: f64 = weaver_core::pass_at_k(labels.view(), 10).unwrap();
    assert_eq!(s, oracle);
    for (&t, &f) in run.fit.params.tpr.iter().zip(&run.fit.params.tnr) {
        assert!(t > 0.97 && f > 0.97, "{t} {f}");
    }
}

#[test]
fn coin_flip_verifiers_fit_near_chance() {
    // votes independent of y: every tpr + tnr should sit near 1
    let b: DatasetBundle<f64> = generate(&spec(3000, 0.4, vec![0.5; 5], vec![0.5; 5], 9)).unwrap();
    let cfg = WeaverConfig {
        prior: Some(0.4),
        ..WeaverConfig::default()
    };
    let pre = weaver_core::pipeline::preprocess(&b, &cfg.preprocess, 0.4).unwrap().1;
    let votes = weaver_core::pipeline::apply_filter(&pre, &cfg.preprocess, 0.4).unwrap();
    let fit = fit_accuracies(&estimate_moments::<f64>(&votes).unwrap(), 0.4, &FitConfig::default()).unwrap();
    for (&t, &f) in fit.params.tpr.iter().zip(&fit.params.tnr) {
        assert!((t + f - 1.0).abs() < 0.1, "tpr {t} tnr {f}");
    }
}

/// Stacks two bundles query-wise; ids stay unique via a prefix.
fn stack(a: &DatasetBundle<f64>, b: &DatasetBundle<f64>) -> DatasetBundle<f64> {
    let scores = concatenate(Axis(0), &[a.scores.scores().view(), b.scores.scores().view()]).unwrap();
    let (la, lb) = (a.labels.as_ref().unwrap(), b.labels.as_ref().unwrap());
    let labels = concatenate(Axis(0), &[la.labels.view(), lb.labels.view()]).unwrap();
    let ids = a
        .query_ids
        .iter()
        .map(|q| format!("a{q}"))
        .chain(b.query_ids.iter().map(|q| format!("b{q}")))
        .collect();
    let tensor = ScoreTensor::new(scores, a.scores.verifiers().to_vec()).unwrap();
    DatasetBundle::new(ids, tensor, Some(LabelSet::fully_labeled(labels)), "stacked").unwrap()
}

#[test]
fn per_cluster_fit_beats_global_on_split_accuracies() {
    // easy queries: first three verifiers informative, the rest random; hard queries: the reverse
    let (good, coin) = (0.9, 0.5);
    let mut per_cluster = Vec::new();
    let mut global = Vec::new();
    for seed in 0..5 {
        let easy_acc = vec![good, good, good, coin, coin, coin];
        let hard_acc = vec![coin, coin, coin, good, good, good];
        let easy = generate(&spec(300, 0.7, easy_acc.clone(), easy_acc, 100 + seed)).unwrap();
        let hard = generate(&spec(300, 0.15, hard_acc.clone(), hard_acc, 200 + seed)).unwrap();
        let bundle = stack(&easy, &hard);
        let cfg = WeaverConfig {
            dev_fraction: 0.1,
            seed,
            ..WeaverConfig::default()
        };
        let b = with_dev(&bundle, &cfg).unwrap();
        let labels = b.labels.as_ref().unwrap();
        let part = partition(&compute_difficulty::<f64>(labels).unwrap(), 2).unwrap();
        let clustered = fit_per_cluster(&b, &part, ThresholdMode::Global, &cfg).unwrap();
        let flat = run_weaver(&b, &cfg).unwrap();
        per_cluster.push(success_rate::<f64>(&clustered.selection, labels.labels.view()).unwrap());
        global.push(success_rate::<f64>(&flat.selection, labels.labels.view()).unwrap());
    }
    assert!(median(per_cluster.clone()) >= median(global.clone()), "{per_cluster:?} vs {global:?}");
}

fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut pos = 0.0;
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                total += 1.0;
                pos += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    pos / total
}

#[test]
fn continuous_logreg_ranks_at_least_as_well_as_binarized() {
    let spec = SynthSpec {
        n: 150,
        k: 4,
        m: 4,
        prior: PriorMode::Fixed { pi: 0.4 },
        accuracies: AccuracySpec::Uniform { lo: 0.6, hi: 0.85 },
        scores: ScoreMode::continuous(),
        answers: None,
        seed: 5,
    };
    let b: DatasetBundle<f64> = generate(&spec).unwrap();
    let x = b.scores.as_rows();
    let y: Vec<u8> = b.labels.as_ref().unwrap().labels.iter().copied().collect();
    let xb = x.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let (train, hold) = train_holdout_split(y.len(), 0.5, 1).unwrap();
    let eval = |features: &Array2<f64>, kind| {
        let tx = features.select(Axis(0), &train);
        let ty: Vec<u8> = train.iter().map(|&r| y[r]).collect();
        let fit = logreg_fit(tx.view(), &ty, kind, &LogRegConfig::default()).unwrap();
        let hx = features.select(Axis(0), &hold);
        let hy: Vec<u8> = hold.iter().map(|&r| y[r]).collect();
        auc(&logreg_predict(&fit.model, hx.view()).unwrap(), &hy)
    };
    let continuous = eval(&x, FeatureKind::Continuous);
    let discrete = eval(&xb, FeatureKind::Binary);
    assert!(continuous >= discrete, "continuous {continuous} discrete {discrete}");
    assert!(continuous > 0.6);
}

#[test]
fn f32_pipeline_agrees_with_f64() {
    let s = spec(400, 0.3, vec![0.9, 0.8, 0.7, 0.65], vec![0.85, 0.8, 0.7, 0.6], 4);
    let cfg = WeaverConfig {
        dev_fraction: 0.1,
        ..WeaverConfig::default()
    };
    let b64: DatasetBundle<f64> = generate(&s).unwrap();
    let b32: DatasetBundle<f32> = generate(&s).unwrap();
    let r64 = run_weaver(&with_dev(&b64, &cfg).unwrap(), &cfg).unwrap();
    let r32 = run_weaver(&with_dev(&b32, &cfg).unwrap(), &cfg).unwrap();
    for (a, b) in r64.fit.params.tpr.iter().zip(&r32.fit.params.tpr) {
        assert!((a - f64::from(*b)).abs() < 1e-3, "{a} {b}");
    }
    let agree = r64
        .selection
        .chosen
        .iter()
        .zip(&r32.selection.chosen)
        .filter(|(a, b)| a == b)
        .count();
    assert!(agree as f64 >= 0.99 * r64.selection.len() as f64);
}

#[test]
fn first_sample_success_is_mean_first_label() {
    let labels = Array2::from_shape_vec((4, 2), vec![1, 0, 1, 1, 0, 1, 1, 0]).unwrap();
    let sel = SelectionResult { chosen: vec![0; 4] };
    assert_eq!(success_rate::<f64>(&sel, labels.view()).unwrap(), 0.75);
}
