use ndarray::{Array2, Array3};
use proptest::prelude::*;
use weaver_core::baselines::{naive_ensemble, top_k_oracle_ensemble};
use weaver_core::clustering::partition;
use weaver_core::evaluation::pass_at_k;
use weaver_core::preprocess::{filter_verifiers, normalize};
use weaver_core::scaling::{beta_passk_closed_form, huber};
use weaver_core::ws::{posterior, select};
use weaver_core::{NormalizationSpec, ScoreTensor, VerifierKind, VoteTensor, WSParams};

fn params_strategy(max_m: usize) -> impl Strategy<Value = (f64, Vec<(f64, f64)>)> {
    (0.05f64..0.95, prop::collection::vec((0.02f64..0.98, 0.02f64..0.98), 1..=max_m))
}

fn build(prior: f64, acc: &[(f64, f64)]) -> WSParams<f64> {
    WSParams::new(prior, acc.iter().map(|a| a.0).collect(), acc.iter().map(|a| a.1).collect()).unwrap()
}

fn tensor(n: usize, k: usize, m: usize, values: &[f64]) -> ScoreTensor<f64> {
    let metas = (0..m)
        .map(|v| weaver_core::VerifierMeta::new(format!("v{v}"), VerifierKind::ContinuousReward))
        .collect();
    ScoreTensor::new(Array3::from_shape_vec((n, k, m), values.to_vec()).unwrap(), metas).unwrap()
}

fn score_tensor_strategy() -> impl Strategy<Value = ScoreTensor<f64>> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(n, k, m)| {
        prop::collection::vec(-5.0f64..5.0, n * k * m).prop_map(move |v| tensor(n, k, m, &v))
    })
}

fn label_matrix(max_k: usize) -> impl Strategy<Value = Array2<u8>> {
    (1usize..6, 1usize..=max_k).prop_flat_map(|(n, k)| {
        prop::collection::vec(0u8..=1, n * k).prop_map(move |v| Array2::from_shape_vec((n, k), v).unwrap())
    })
}

fn binom(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Fraction of size-k subsets with at least one correct response, averaged over queries.
fn enumerate(labels: &Array2<u8>, k: usize) -> f64 {
    let big_k = labels.ncols();
    let mut total = 0.0;
    for row in labels.rows() {
        let mut hit = 0usize;
        let mut count = 0usize;
        for mask in 0u32..(1 << big_k) {
            if mask.count_ones() as usize != k {
                continue;
            }
            count += 1;
            if (0..big_k).any(|j| mask & (1 << j) != 0 && row[j] == 1) {
                hit += 1;
            }
        }
        assert_eq!(count as f64, binom(big_k, k));
        total += hit as f64 / count as f64;
    }
    total / labels.nrows() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn posterior_is_permutation_equivariant(
        (prior, acc) in params_strategy(8),
        bits in prop::collection::vec(0u8..=1, 8),
        seed in any::<u64>(),
    ) {
        let m = acc.len();
        let votes = &bits[..m];
        let mut order: Vec<usize> = (0..m).collect();
        // deterministic shuffle from the seed
        for i in (1..m).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as usize % (i + 1);
            order.swap(i, j);
        }
        let permuted_acc: Vec<_> = order.iter().map(|&i| acc[i]).collect();
        let permuted_votes: Vec<u8> = order.iter().map(|&i| votes[i]).collect();
        let a = posterior(votes, &build(prior, &acc)).unwrap();
        let b = posterior(&permuted_votes, &build(prior, &permuted_acc)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn posterior_increases_with_positive_votes(
        (prior, acc) in params_strategy(8),
        bits in prop::collection::vec(0u8..=1, 8),
        which in 0usize..8,
    ) {
        // shift every verifier above chance
        let acc: Vec<(f64, f64)> = acc.iter().map(|&(a, b)| (0.5 + a / 2.0, 0.5 + b / 2.0 - 1e-3)).collect();
        let m = acc.len();
        let k = which % m;
        let mut low = bits[..m].to_vec();
        low[k] = 0;
        let mut high = low.clone();
        high[k] = 1;
        let params = build(prior, &acc);
        prop_assert!(posterior(&high, &params).unwrap() > posterior(&low, &params).unwrap());
    }

    #[test]
    fn selection_invariant_under_increasing_transform(
        values in prop::collection::vec(0.0f64..1.0, 1..40),
        k in 1usize..5,
    ) {
        let n = values.len() / k;
        prop_assume!(n > 0);
        let p = Array2::from_shape_vec((n, k), values[..n * k].to_vec()).unwrap();
        let t = p.mapv(|x| x.powi(3) + 2.0 * x + 7.0);
        prop_assert_eq!(select(p.view()), select(t.view()));
    }

    #[test]
    fn pass_at_k_matches_enumeration(labels in label_matrix(8), k_raw in 1usize..=8) {
        let k = (k_raw - 1) % labels.ncols() + 1;
        let fast: f64 = pass_at_k(labels.view(), k).unwrap();
        prop_assert!((fast - enumerate(&labels, k)).abs() < 1e-12);
    }

    #[test]
    fn pass_at_k_non_decreasing_in_k(labels in label_matrix(12)) {
        let mut prev = 0.0f64;
        for k in 1..=labels.ncols() {
            let v: f64 = pass_at_k(labels.view(), k).unwrap();
            prop_assert!(v + 1e-12 >= prev);
            prev = v;
        }
    }

    #[test]
    fn huber_is_c1_at_the_knee(delta in 0.01f64..2.0) {
        let h = 1e-7 * delta;
        let left = huber(delta - h, delta);
        let right = huber(delta + h, delta);
        let at = huber(delta, delta);
        prop_assert!((at - delta * delta / 2.0).abs() < 1e-15);
        prop_assert!((left - at).abs() <= 1.01 * delta * h);
        prop_assert!((right - at).abs() <= 1.01 * delta * h);
        let slope_left = (at - left) / h;
        let slope_right = (right - at) / h;
        prop_assert!((slope_left - slope_right).abs() < 1e-4 * delta.max(1.0));
    }

    #[test]
    fn normalization_is_monotone_per_verifier(t in score_tensor_strategy()) {
        let out = normalize(&t, &NormalizationSpec::default()).unwrap().tensor;
        for v in 0..t.m() {
            let raw = t.column(v);
            let norm = out.column(v);
            for a in 0..raw.len() {
                for b in 0..raw.len() {
                    if raw[a] < raw[b] {
                        prop_assert!(norm[a] <= norm[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn naive_ensemble_ignores_column_order(t in score_tensor_strategy()) {
        let m = t.m();
        let order: Vec<usize> = (0..m).rev().collect();
        prop_assert_eq!(naive_ensemble(&t), naive_ensemble(&t.select_verifiers(&order)));
    }

    #[test]
    fn top_m_oracle_equals_naive(t in score_tensor_strategy(), bits in prop::collection::vec(0u8..=1, 36)) {
        let labels = Array2::from_shape_vec((t.n(), t.k()), bits[..t.n() * t.k()].to_vec()).unwrap();
        prop_assert_eq!(top_k_oracle_ensemble(&t, labels.view(), t.m()).unwrap(), naive_ensemble(&t));
    }

    #[test]
    fn partition_covers_every_query_once(
        diffs in prop::collection::vec(0.0f64..=1.0, 1..60),
        c in 1usize..8,
    ) {
        let c = c.min(diffs.len());
        let part = partition(&diffs, c).unwrap();
        prop_assert_eq!(part.assignment.len(), diffs.len());
        prop_assert_eq!(part.sizes().iter().sum::<usize>(), diffs.len());
        let mut seen = vec![0; diffs.len()];
        for cl in 0..c {
            for q in part.members(cl) {
                seen[q] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        let sizes = part.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn beta_closed_form_is_monotone(a in 0.2f64..5.0, b in 0.2f64..5.0, k in 1usize..40) {
        let f = |a: f64, b: f64, k: usize| beta_passk_closed_form(a, b, k);
        prop_assert!(f(a, b, k + 1) + 1e-12 >= f(a, b, k));
        prop_assert!(f(a * 1.5, b, k) + 1e-12 >= f(a, b, k));
        prop_assert!(f(a, b * 1.5, k) <= f(a, b, k) + 1e-12);
    }

    #[test]
    fn filter_keeps_votes_and_respects_middle_band(
        rates in prop::collection::vec(0.0f64..1.0, 2..8),
        prior in 0.2f64..=0.8,
    ) {
        // column v has round(rate * 100) positives out of 100 rows
        let m = rates.len();
        let votes = Array3::from_shape_fn((20, 5, m), |(i, j, v)| {
            let row = i * 5 + j;
            u8::from(row < (rates[v] * 100.0).round() as usize)
        });
        let ids: Vec<String> = (0..m).map(|v| format!("v{v}")).collect();
        let all = VoteTensor::from_votes(votes.clone(), ids).unwrap();
        match filter_verifiers(&all, prior) {
            Ok(kept) => {
                for (col, &orig) in kept.kept.iter().enumerate() {
                    let rho = kept.marginals()[col];
                    prop_assert!((0.2..=0.8).contains(&rho));
                    prop_assert_eq!(kept.votes.index_axis(ndarray::Axis(2), col), votes.index_axis(ndarray::Axis(2), orig));
                }
            }
            Err(e) => prop_assert_eq!(e.kind(), "no_verifiers_survive"),
        }
    }
}
