//! Small descriptive-statistics helpers shared across modules.

use std::cmp::Ordering;

use crate::scalar::Real;

pub(crate) fn total_cmp<T: Real>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Percentile `p` (in `[0, 100]`) of `values` using linear interpolation
/// between order statistics: rank `h = (N - 1) * p / 100`.
///
/// Returns `None` for an empty slice.
pub fn percentile<T: Real>(values: &[T], p: T) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(total_cmp);
    Some(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted<T: Real>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = T::from_count(n - 1) * p / T::lit(100.0);
    let lo = h.floor();
    let lo_idx = lo.to_usize().unwrap_or(0).min(n - 1);
    let hi_idx = (lo_idx + 1).min(n - 1);
    let frac = h - lo;
    sorted[lo_idx] + frac * (sorted[hi_idx] - sorted[lo_idx])
}

/// Quantile `q` in `[0, 1]` with the same interpolation rule as [`percentile`].
pub fn quantile<T: Real>(values: &[T], q: T) -> Option<T> {
    percentile(values, q * T::lit(100.0))
}

pub fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().copied().sum::<T>() / T::from_count(values.len()))
    }
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// 1-based average ranks (ties share the mean of their positions).
pub fn average_ranks<T: Real>(values: &[T]) -> Vec<T> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| total_cmp(&values[a], &values[b]));
    let mut ranks = vec![T::zero(); n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let avg = T::from_count(start + 1 + end) / T::lit(2.0);
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        start = end;
    }
    ranks
}

pub fn spearman<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b, O(n^2).
pub fn kendall_tau_b<T: Real>(x: &[T], y: &[T]) -> Option<T> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = total_cmp(&x[i], &x[j]);
            let dy = total_cmp(&y[i], &y[j]);
            match (dx, dy) {
                (Ordering::Equal, Ordering::Equal) => {}
                (Ordering::Equal, _) => tie_x += 1,
                (_, Ordering::Equal) => tie_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n_x = (concordant + discordant + tie_x) as f64;
    let n_y = (concordant + discordant + tie_y) as f64;
    if n_x == 0.0 || n_y == 0.0 {
        return None;
    }
    T::from_f64((concordant - discordant) as f64 / (n_x * n_y).sqrt())
}

/// Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2).
///
/// `None` when one class is absent.
pub fn roc_auc<T: Real>(scores: &[T], labels: &[bool]) -> Option<T> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let pos_rank_sum: T = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&r, _)| r)
        .sum();
    let np = T::from_count(n_pos);
    let u = pos_rank_sum - np * (np + T::one()) / T::lit(2.0);
    Some(u / (np * T::from_count(n_neg)))
}
