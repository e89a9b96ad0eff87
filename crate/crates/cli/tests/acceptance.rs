//! Acceptance suite: one `[PASS]`, `[FAIL]` or `[SKIP]` line per criterion.
//! Exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weaver_core::evaluation::pass_at_k;
use weaver_core::pipeline::{run_strategy, run_weaver, with_dev};
use weaver_core::preprocess::{filter_verifiers, DropReason};
use weaver_core::scaling::{beta_passk_closed_form, fit_selection_curve, predict};
use weaver_core::synth::{empirical_passk_curve, generate, AccuracySpec, AnswerSpec, PriorMode, ScoreMode, SynthSpec};
use weaver_core::ws::posterior;
use weaver_core::{
    load_dataset, success_rate, CurveForm, CurvePoint, DataFormat, DatasetBundle, ScalingFit, Strategy, VoteTensor,
    WSParams, WeaverConfig,
};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn within(limit: Duration, elapsed: Duration, verdict: Verdict) -> Verdict {
    match verdict {
        Verdict::Pass(d) if elapsed > limit => Verdict::Fail(format!("{d}; took {elapsed:.2?} > {limit:?}")),
        v => v,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// 1
fn posterior_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut patterns = 0usize;
    for m in 1..=10 {
        for _ in 0..50 {
            let prior: f64 = rng.random_range(0.05..0.95);
            let tpr: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
            let tnr: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
            let params = WSParams::new(prior, tpr.clone(), tnr.clone()).unwrap();
            for mask in 0u32..(1 << m) {
                let votes: Vec<u8> = (0..m).map(|k| ((mask >> k) & 1) as u8).collect();
                let (mut joint1, mut joint0) = (prior, 1.0 - prior);
                for k in 0..m {
                    joint1 *= if votes[k] == 1 { tpr[k] } else { 1.0 - tpr[k] };
                    joint0 *= if votes[k] == 1 { 1.0 - tnr[k] } else { tnr[k] };
                }
                let exact = joint1 / (joint1 + joint0);
                worst = worst.max((posterior(&votes, &params).unwrap() - exact).abs());
                patterns += 1;
            }
        }
    }
    within(
        Duration::from_secs(10),
        start.elapsed(),
        check(worst <= 1e-9, format!("{patterns} patterns, max error {worst:.2e}")),
    )
}

// 2
fn unsupervised_recovery() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let spec = SynthSpec {
            n: 2000,
            k: 10,
            m: 10,
            prior: PriorMode::Fixed { pi: 0.4 },
            accuracies: AccuracySpec::Uniform { lo: 0.6, hi: 0.9 },
            scores: ScoreMode::Discrete,
            answers: None,
            seed,
        };
        let bundle: DatasetBundle<f64> = generate(&spec).unwrap();
        let truth = bundle.provenance.truth.clone().unwrap();
        let cfg = WeaverConfig {
            dev_fraction: 0.1,
            seed,
            ..WeaverConfig::default()
        };
        let run = run_weaver(&with_dev(&bundle, &cfg).unwrap(), &cfg).unwrap();
        let mut err = 0.0f64;
        for (col, &orig) in run.votes.kept.iter().enumerate() {
            err = err
                .max((run.fit.params.tpr[col] - truth.tpr[orig]).abs())
                .max((run.fit.params.tnr[col] - truth.tnr[orig]).abs());
        }
        let prior_err = (run.prior - 0.4).abs();
        let seed_ok = run.votes.kept.len() == 10 && err <= 0.05 && prior_err <= 0.03;
        ok &= seed_ok;
        lines.push(format!("seed {seed}: acc {err:.4} prior {prior_err:.4}"));
    }
    within(Duration::from_secs(60), start.elapsed(), check(ok, lines.join(", ")))
}

// 3
fn selection_superiority() -> Verdict {
    let (mut weaver, mut naive, mut majority) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let acc = vec![0.95, 0.9, 0.55, 0.55, 0.6, 0.6, 0.55];
        let spec = SynthSpec {
            n: 1000,
            k: 10,
            m: acc.len(),
            prior: PriorMode::Fixed { pi: 0.3 },
            accuracies: AccuracySpec::Explicit {
                tpr: acc.clone(),
                tnr: acc,
            },
            scores: ScoreMode::Discrete,
            answers: Some(AnswerSpec { wrong_answers: 3 }),
            seed,
        };
        let bundle: DatasetBundle<f64> = generate(&spec).unwrap();
        let cfg = WeaverConfig {
            dev_fraction: 0.05,
            seed,
            ..WeaverConfig::default()
        };
        let b = with_dev(&bundle, &cfg).unwrap();
        let labels = b.labels.as_ref().unwrap().labels.clone();
        let rate = |s: Strategy| -> f64 { success_rate(&run_strategy(&s, &b, &cfg).unwrap(), labels.view()).unwrap() };
        weaver.push(rate(Strategy::Weaver));
        naive.push(rate(Strategy::Naive));
        majority.push(rate(Strategy::Majority));
    }
    let (w, n, m) = (median(weaver), median(naive), median(majority));
    check(
        w - n >= 0.03 && w - m >= 0.03,
        format!("median weaver {w:.3}, naive {n:.3}, majority {m:.3}"),
    )
}

// 4
fn pass_at_k_exactness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=12);
        let big_k = rng.random_range(1..=8);
        let labels = Array2::from_shape_fn((n, big_k), |_| u8::from(rng.random_bool(0.35)));
        for k in 1..=big_k {
            let mut total = 0.0;
            for row in labels.rows() {
                let (mut hit, mut count) = (0u32, 0u32);
                for mask in 0u32..(1 << big_k) {
                    if mask.count_ones() as usize == k {
                        count += 1;
                        hit += u32::from((0..big_k).any(|j| mask >> j & 1 == 1 && row[j] == 1));
                    }
                }
                total += f64::from(hit) / f64::from(count);
            }
            let exact = total / n as f64;
            let fast: f64 = pass_at_k(labels.view(), k).unwrap();
            worst = worst.max((fast - exact).abs());
        }
    }
    within(
        Duration::from_secs(5),
        start.elapsed(),
        check(worst <= 1e-12, format!("100 matrices, max error {worst:.2e}")),
    )
}

// 5
fn beta_binomial_consistency() -> Verdict {
    let spec = SynthSpec {
        n: 5000,
        k: 16,
        m: 1,
        prior: PriorMode::Beta { a: 1.0, b: 1.0 },
        accuracies: AccuracySpec::Uniform { lo: 0.7, hi: 0.8 },
        scores: ScoreMode::Discrete,
        answers: None,
        seed: 5,
    };
    let bundle: DatasetBundle<f64> = generate(&spec).unwrap();
    let ks = [1, 2, 4, 8, 16];
    let curve = empirical_passk_curve(&bundle, &ks).unwrap();
    let mut worst = 0.0f64;
    for p in &curve {
        worst = worst.max((p.value - beta_passk_closed_form(1.0, 1.0, p.k)).abs());
    }
    check(worst <= 0.02, format!("max deviation {worst:.4} over k in {ks:?}"))
}

// 6
fn scaling_fit_fidelity() -> Verdict {
    let truth = ScalingFit {
        form: CurveForm::SelectionFull,
        floor: 0.3958,
        ceil: 0.6728,
        zeta: 0.7320,
        alpha: 1.5865,
        pi_eff: 0.3250,
        gamma: 0.5053,
        delta: 0.1,
        r2: 1.0,
        mse: 0.0,
        degenerate: false,
        converged: true,
    };
    let points: Vec<CurvePoint<f64>> = (1..=100)
        .map(|k| CurvePoint {
            k,
            value: predict(&truth, k),
            stderr: None,
        })
        .collect();
    let fit = fit_selection_curve(&points[..90]).unwrap();
    let held: f64 = points[90..].iter().map(|p| (predict(&fit, p.k) - p.value).powi(2)).sum::<f64>() / 10.0;
    check(
        fit.r2 >= 0.99 && held <= 1e-3,
        format!("r2 {:.6}, held-out mse {held:.2e}", fit.r2),
    )
}

// 7
fn filtering_rules() -> Verdict {
    // column v has round(100 * rate) positive votes out of 100
    let votes_with = |rates: &[f64]| {
        let arr = Array3::from_shape_fn((20, 5, rates.len()), |(i, j, v)| {
            u8::from(i * 5 + j < (rates[v] * 100.0).round() as usize)
        });
        let ids = (0..rates.len()).map(|v| format!("r{:02}", (rates[v] * 100.0).round())).collect();
        VoteTensor::from_votes(arr, ids).unwrap()
    };
    let cases: [(&str, f64, Vec<f64>, Vec<&str>, Vec<&str>); 4] = [
        (
            "middle prior",
            0.5,
            vec![0.1, 0.2, 0.5, 0.8, 0.9, 0.99, 0.0],
            vec!["r20", "r50", "r80"],
            vec!["r00"],
        ),
        ("low prior", 0.1, vec![0.05, 0.15, 0.5, 0.8, 0.85], vec!["r05", "r15", "r50", "r80"], vec![]),
        ("high prior", 0.9, vec![0.1, 0.2, 0.5, 0.95], vec!["r20", "r50", "r95"], vec![]),
        ("skewed verifier, prior 0.99", 0.99, vec![0.99, 0.5], vec!["r99", "r50"], vec![]),
    ];
    let mut failures = Vec::new();
    for (name, prior, rates, keep, constant) in cases {
        let out = filter_verifiers(&votes_with(&rates), prior).unwrap();
        let kept = out.kept_ids();
        let constant_ids: Vec<&str> = out
            .dropped
            .iter()
            .filter(|d| d.reason == DropReason::ConstantOutput)
            .map(|d| d.verifier_id.as_str())
            .collect();
        if kept != keep || constant_ids != constant {
            failures.push(format!("{name}: kept {kept:?}"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "middle, low, high and skewed branches keep exactly the expected verifiers".into()
        } else {
            failures.join("; ")
        },
    )
}

// 8
fn run_cli(args: &[&str], threads: Option<&str>) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_weaver"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("WEAVER_THREADS", t),
        None => cmd.env_remove("WEAVER_THREADS"),
    };
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_pass(dir: &Path, threads: Option<&str>) -> Result<Vec<PathBuf>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let spec = r#"{"n": 200, "k": 8, "m": 5, "prior": {"mode": "fixed", "pi": 0.35},
        "accuracies": {"mode": "uniform", "lo": 0.6, "hi": 0.9},
        "scores": {"mode": "continuous"}, "answers": {"wrong_answers": 3}, "seed": 8}"#;
    std::fs::write(dir.join("spec.json"), spec).map_err(|e| e.to_string())?;
    let curve: String = std::iter::once("k,value".to_string())
        .chain((1..=32).map(|k| format!("{k},{}", 0.9 - 0.5 * (k as f64).powf(-0.6))))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(dir.join("curve.csv"), curve).map_err(|e| e.to_string())?;
    let data = p("data.jsonl");
    let run = |args: &[&str]| run_cli(args, threads);
    run(&["synth", "--spec", &p("spec.json"), "--out", &data])?;
    run(&["ingest", "--data", &data, "--out", &p("ingest.json")])?;
    run(&["fit", "--data", &data, "--seed", "3", "--dev-fraction", "0.1", "--out", &p("fit.json")])?;
    run(&[
        "fit", "--data", &data, "--seed", "3", "--dev-fraction", "0.1", "--clusters", "2", "--threshold-mode",
        "per_model", "--out", &p("fit_clustered.json"),
    ])?;
    run(&["select", "--data", &data, "--fit", &p("fit.json"), "--out", &p("selection.json")])?;
    run(&[
        "eval", "--data", &data, "--seed", "3", "--dev-fraction", "0.1", "--strategies",
        "weaver,majority,naive,first,naive_bayes,logreg", "--k", "1,4,8", "--trials", "4", "--selection",
        &p("selection.json"), "--out", &p("eval.json"), "--csv", &p("eval.csv"),
    ])?;
    run(&["scaling-fit", "--input", &p("curve.csv"), "--form", "selection", "--out", &p("scaling.json")])?;
    run(&["export-distill", "--data", &data, "--fit", &p("fit_clustered.json"), "--out", &p("pseudo.jsonl")])?;
    Ok([
        "data.jsonl",
        "data.jsonl.verifiers.json",
        "truth.json",
        "ingest.json",
        "fit.json",
        "fit_clustered.json",
        "selection.json",
        "eval.json",
        "eval.csv",
        "scaling.json",
        "pseudo.jsonl",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect())
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = match cli_pass(a.path(), None) {
        Ok(f) => f,
        Err(e) => return Verdict::Fail(e),
    };
    // second run with a single worker thread
    let second = match cli_pass(b.path(), Some("1")) {
        Ok(f) => f,
        Err(e) => return Verdict::Fail(e),
    };
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| std::fs::read(x).ok() != std::fs::read(y).ok())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across runs and thread counts", first.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

// 9
fn released_data() -> Verdict {
    let Ok(root) = std::env::var("WEAVER_RELEASED_DATA") else {
        return Verdict::Skip("WEAVER_RELEASED_DATA not set; released score datasets not supplied".into());
    };
    // (file stem, Weaver success %, Pass@100 %)
    let table = [
        ("math500", 93.4, 98.6),
        ("gpqa_diamond", 72.1, 81.0),
        ("mmlu_college", 94.9, 96.0),
        ("mmlu_pro", 90.2, 92.0),
    ];
    let mut lines = Vec::new();
    let mut ok = true;
    let mut found = 0;
    for (stem, success_ref, pass_ref) in table {
        let path = Path::new(&root).join(format!("{stem}.jsonl"));
        if !path.exists() {
            continue;
        }
        found += 1;
        let bundle: DatasetBundle<f64> = match load_dataset(&path, DataFormat::Jsonl) {
            Ok(b) => b,
            Err(e) => return Verdict::Fail(format!("{stem}: {e}")),
        };
        let cfg = WeaverConfig::default();
        let result = with_dev(&bundle, &cfg).and_then(|b| {
            let labels = b.require_labels()?.require_full()?.clone();
            let run = run_weaver(&b, &cfg)?;
            let s: f64 = success_rate(&run.selection, labels.view())?;
            let p: f64 = pass_at_k(labels.view(), b.k().min(100))?;
            Ok((100.0 * s, 100.0 * p))
        });
        match result {
            Ok((s, p)) => {
                ok &= (s - success_ref).abs() <= 1.0 && (p - pass_ref).abs() <= 0.2;
                lines.push(format!("{stem}: success {s:.1} (ref {success_ref}), pass@100 {p:.1} (ref {pass_ref})"));
            }
            Err(e) => return Verdict::Fail(format!("{stem}: {e}")),
        }
    }
    if found == 0 {
        return Verdict::Skip(format!("no released datasets found under {root}"));
    }
    check(ok, lines.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("posterior matches brute-force Bayes enumeration", posterior_oracle),
        ("unsupervised accuracy and prior recovery", unsupervised_recovery),
        ("selection beats naive ensemble and majority vote", selection_superiority),
        ("Pass@k equals subset enumeration", pass_at_k_exactness),
        ("Beta-Binomial coverage matches closed form", beta_binomial_consistency),
        ("scaling-curve refit and extrapolation", scaling_fit_fidelity),
        ("verifier filtering rules", filtering_rules),
        ("CLI artifacts are deterministic", determinism),
        ("released datasets reproduce reported numbers", released_data),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {}. {name} ({elapsed:.2}s): {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
