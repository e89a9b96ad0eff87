//! Synthetic datasets drawn from the latent-variable model, with known parameters.
//!
//! All randomness comes from a single `ChaCha8Rng` stream seeded with
//! `seed_from_u64(spec.seed)`. Draw order: verifier accuracies (tpr then tnr
//! per verifier, only when sampled), then per query the difficulty `p_i`
//! (beta mode), then per response the label, the answer, and one score per
//! verifier.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datastore::{DatasetBundle, LabelSet, ScoreTensor, VerifierKind, VerifierMeta};
use crate::error::{Error, Result};
use crate::evaluation::pass_at_k;
use crate::scalar::Real;
use crate::scaling::CurvePoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PriorMode {
    /// Every response is correct with probability `pi`.
    Fixed { pi: f64 },
    /// Per-query difficulty `p_i ~ Beta(a, b)`.
    Beta { a: f64, b: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AccuracySpec {
    Explicit { tpr: Vec<f64>, tnr: Vec<f64> },
    /// Each tpr and tnr drawn independently from `U[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScoreMode {
    /// Scores are the binary votes themselves.
    Discrete,
    /// Scores drawn from `Beta(f1)` when the verifier's noisy view is positive,
    /// `Beta(f0)` otherwise. With perfect accuracies this is the plain
    /// class-conditional score model.
    Continuous {
        #[serde(default = "default_f1")]
        f1: (f64, f64),
        #[serde(default = "default_f0")]
        f0: (f64, f64),
    },
}

fn default_f1() -> (f64, f64) {
    (5.0, 2.0)
}

fn default_f0() -> (f64, f64) {
    (2.0, 5.0)
}

impl ScoreMode {
    pub fn continuous() -> Self {
        ScoreMode::Continuous {
            f1: default_f1(),
            f0: default_f0(),
        }
    }
}

/// Extracted answers: correct responses say `"correct"`, wrong ones pick one of
/// `wrong_answers` distractors uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerSpec {
    pub wrong_answers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub prior: PriorMode,
    pub accuracies: AccuracySpec,
    #[serde(default = "discrete")]
    pub scores: ScoreMode,
    #[serde(default)]
    pub answers: Option<AnswerSpec>,
    #[serde(default)]
    pub seed: u64,
}

fn discrete() -> ScoreMode {
    ScoreMode::Discrete
}

/// Generating parameters recorded alongside a synthetic bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub prior: PriorMode,
    pub tpr: Vec<f64>,
    pub tnr: Vec<f64>,
    pub scores: ScoreMode,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 || self.k == 0 || self.m == 0 {
            return bad(format!("n, K, m must be positive: {} {} {}", self.n, self.k, self.m));
        }
        match &self.prior {
            PriorMode::Fixed { pi } if !(*pi > 0.0 && *pi < 1.0) => return bad(format!("pi {pi} outside (0, 1)")),
            PriorMode::Beta { a, b } if !(*a > 0.0 && *b > 0.0) => return bad(format!("beta({a}, {b}) needs positive shapes")),
            _ => {}
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        match &self.accuracies {
            AccuracySpec::Explicit { tpr, tnr } => {
                if tpr.len() != self.m || tnr.len() != self.m {
                    return bad(format!("need {} accuracies, got {} / {}", self.m, tpr.len(), tnr.len()));
                }
                if !tpr.iter().chain(tnr).all(|&p| unit(p)) {
                    return bad("accuracies must lie in [0, 1]".into());
                }
            }
            AccuracySpec::Uniform { lo, hi } => {
                if !(unit(*lo) && unit(*hi) && lo <= hi) {
                    return bad(format!("accuracy range [{lo}, {hi}] invalid"));
                }
            }
        }
        if let ScoreMode::Continuous { f1, f0 } = &self.scores {
            if !(f1.0 > 0.0 && f1.1 > 0.0 && f0.0 > 0.0 && f0.1 > 0.0) {
                return bad("score beta shapes must be positive".into());
            }
        }
        if let Some(a) = &self.answers {
            if a.wrong_answers == 0 {
                return bad("need at least one wrong answer".into());
            }
        }
        Ok(())
    }
}

fn beta(a: f64, b: f64) -> Result<Beta<f64>> {
    Beta::new(a, b).map_err(|e| Error::InvalidArgument(format!("beta({a}, {b}): {e}")))
}

fn bernoulli(p: f64) -> Result<Bernoulli> {
    Bernoulli::new(p).map_err(|e| Error::InvalidArgument(format!("bernoulli({p}): {e}")))
}

/// Draws a fully labeled bundle; the same spec always yields the same bundle.
pub fn generate<T: Real>(spec: &SynthSpec) -> Result<DatasetBundle<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (tpr, tnr) = match &spec.accuracies {
        AccuracySpec::Explicit { tpr, tnr } => (tpr.clone(), tnr.clone()),
        AccuracySpec::Uniform { lo, hi } => {
            let mut tpr = Vec::with_capacity(spec.m);
            let mut tnr = Vec::with_capacity(spec.m);
            for _ in 0..spec.m {
                tpr.push(rng.random_range(*lo..=*hi));
                tnr.push(rng.random_range(*lo..=*hi));
            }
            (tpr, tnr)
        }
    };
    let positive_view: Vec<Bernoulli> = tpr.iter().map(|&p| bernoulli(p)).collect::<Result<_>>()?;
    let false_alarm: Vec<Bernoulli> = tnr.iter().map(|&p| bernoulli(1.0 - p)).collect::<Result<_>>()?;
    let score_dists = match &spec.scores {
        ScoreMode::Discrete => None,
        ScoreMode::Continuous { f1, f0 } => Some((beta(f1.0, f1.1)?, beta(f0.0, f0.1)?)),
    };
    let difficulty = match &spec.prior {
        PriorMode::Beta { a, b } => Some(beta(*a, *b)?),
        PriorMode::Fixed { .. } => None,
    };

    let (n, k, m) = (spec.n, spec.k, spec.m);
    let mut scores = Array3::<T>::zeros((n, k, m));
    let mut labels = Array2::<u8>::zeros((n, k));
    let mut answers = spec.answers.as_ref().map(|_| Array2::<String>::default((n, k)));

    for i in 0..n {
        let p_i = match (&spec.prior, &difficulty) {
            (PriorMode::Fixed { pi }, _) => *pi,
            (_, Some(d)) => d.sample(&mut rng),
            _ => unreachable!("prior mode and distribution agree"),
        };
        let correct = bernoulli(p_i.clamp(0.0, 1.0))?;
        for j in 0..k {
            let y = correct.sample(&mut rng);
            labels[[i, j]] = u8::from(y);
            if let (Some(a), Some(spec_a)) = (answers.as_mut(), spec.answers.as_ref()) {
                a[[i, j]] = if y {
                    "correct".to_string()
                } else {
                    format!("wrong_{}", rng.random_range(0..spec_a.wrong_answers))
                };
            }
            for v in 0..m {
                let vote = if y {
                    positive_view[v].sample(&mut rng)
                } else {
                    false_alarm[v].sample(&mut rng)
                };
                let s = match &score_dists {
                    None => f64::from(u8::from(vote)),
                    Some((f1, f0)) => {
                        if vote {
                            f1.sample(&mut rng)
                        } else {
                            f0.sample(&mut rng)
                        }
                    }
                };
                scores[[i, j, v]] = T::lit(s);
            }
        }
    }

    let kind = match spec.scores {
        ScoreMode::Discrete => VerifierKind::BinaryJudge,
        ScoreMode::Continuous { .. } => VerifierKind::ContinuousReward,
    };
    let verifiers = (0..m).map(|v| VerifierMeta::new(format!("v{v:02}"), kind)).collect();
    let mut label_set = LabelSet::fully_labeled(labels);
    label_set.answers = answers;
    let mut bundle = DatasetBundle::new(
        (0..n).map(|i| format!("q{i:06}")).collect(),
        ScoreTensor::new(scores, verifiers)?,
        Some(label_set),
        format!("synth:seed={}", spec.seed),
    )?;
    bundle.provenance.truth = Some(SynthTruth {
        prior: spec.prior.clone(),
        tpr,
        tnr,
        scores: spec.scores.clone(),
        seed: spec.seed,
    });
    Ok(bundle)
}

/// Unbiased Pass@k at each requested `k`.
pub fn empirical_passk_curve<T: Real>(bundle: &DatasetBundle<T>, ks: &[usize]) -> Result<Vec<CurvePoint<T>>> {
    let labels = bundle.require_labels()?.require_full()?;
    ks.iter()
        .map(|&k| {
            Ok(CurvePoint {
                k,
                value: pass_at_k(labels.view(), k)?,
                stderr: None,
            })
        })
        .collect()
}
