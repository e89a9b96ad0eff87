//! Coverage and selection scaling curves in the number of samples `K`.
//!
//! Both fitted forms share one expression:
//!
//! ```text
//! floor + (ceil - floor) * exp(-zeta * K^-alpha) * (1 - (1 - pi)^(K^gamma))
//! ```
//!
//! The coverage form fixes the last factor to 1.

mod optimizer;

use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DELTA_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.25, 0.5];
pub const ZETA_MAX: f64 = 10.0;
pub const ALPHA_MAX: f64 = 3.0;
pub const GAMMA_MAX: f64 = 2.5;
pub const N_STARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CurvePoint<T> {
    pub k: usize,
    pub value: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveForm {
    CoveragePower,
    SelectionFull,
}

impl std::str::FromStr for CurveForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" | "coverage_power" => Ok(Self::CoveragePower),
            "selection" | "selection_full" => Ok(Self::SelectionFull),
            other => Err(Error::InvalidArgument(format!("unknown curve form '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ScalingFit<T> {
    pub form: CurveForm,
    pub floor: T,
    pub ceil: T,
    pub zeta: T,
    pub alpha: T,
    /// Fixed at 1 for the coverage form.
    pub pi_eff: T,
    /// Fixed at 0 for the coverage form.
    pub gamma: T,
    pub delta: T,
    pub r2: T,
    pub mse: T,
    /// Set when the series carries no K-dependence (zero variance).
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub converged: bool,
}

/// `r^2 / 2` inside `[-delta, delta]`, linear outside.
pub fn huber<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        r * r / T::lit(2.0)
    } else {
        delta * (a - delta / T::lit(2.0))
    }
}

fn huber_grad(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

/// Expected fraction of problems solved within `k` attempts when each
/// problem's success probability is `Beta(a, b)`: `1 - B(a, b + k) / B(a, b)`.
pub fn beta_passk_closed_form<T: Real>(a: T, b: T, k: usize) -> T {
    let (a, b, k) = (a.as_f64(), b.as_f64(), k as f64);
    let log_ratio = ln_gamma(b + k) - ln_gamma(a + b + k) - ln_gamma(b) + ln_gamma(a + b);
    T::lit((1.0 - log_ratio.exp()).clamp(0.0, 1.0))
}

/// Parameters in fitting coordinates: ceil is `floor + range * (1 - floor)`
/// so the box alone keeps `floor <= ceil <= 1`.
#[derive(Clone, Copy, Debug)]
struct Theta {
    floor: f64,
    range: f64,
    zeta: f64,
    alpha: f64,
    pi: f64,
    gamma: f64,
}

impl Theta {
    fn from_slice(form: CurveForm, x: &[f64]) -> Self {
        match form {
            CurveForm::CoveragePower => Self {
                floor: x[0],
                range: x[1],
                zeta: x[2],
                alpha: x[3],
                pi: 1.0,
                gamma: 0.0,
            },
            CurveForm::SelectionFull => Self {
                floor: x[0],
                range: x[1],
                zeta: x[2],
                alpha: x[3],
                pi: x[4],
                gamma: x[5],
            },
        }
    }

    fn ceil(&self) -> f64 {
        self.floor + self.range * (1.0 - self.floor)
    }

    /// Value and gradient (in the order of the fitting vector) at `k`.
    fn eval(&self, k: f64, grad: Option<&mut [f64]>) -> f64 {
        let ln_k = k.ln();
        let k_neg_alpha = (-self.alpha * ln_k).exp();
        let e = (-self.zeta * k_neg_alpha).exp();
        let q = (1.0 - self.pi).max(0.0);
        let kg = (self.gamma * ln_k).exp();
        let (v, dv_dpi, dv_dgamma) = if q == 0.0 {
            (1.0, if kg == 1.0 { 1.0 } else { 0.0 }, 0.0)
        } else {
            let qk = (kg * q.ln()).exp();
            (1.0 - qk, kg * qk / q, -qk * q.ln() * kg * ln_k)
        };
        let amp = self.range * (1.0 - self.floor);
        let value = self.floor + amp * e * v;
        if let Some(g) = grad {
            g[0] = 1.0 - self.range * e * v;
            g[1] = (1.0 - self.floor) * e * v;
            g[2] = -amp * v * e * k_neg_alpha;
            g[3] = amp * v * e * self.zeta * k_neg_alpha * ln_k;
            if g.len() > 4 {
                g[4] = amp * e * dv_dpi;
                g[5] = amp * e * dv_dgamma;
            }
        }
        value
    }
}

fn bounds(form: CurveForm) -> (Vec<f64>, Vec<f64>) {
    match form {
        CurveForm::CoveragePower => (vec![0.0; 4], vec![1.0, 1.0, ZETA_MAX, ALPHA_MAX]),
        CurveForm::SelectionFull => (vec![0.0; 6], vec![1.0, 1.0, ZETA_MAX, ALPHA_MAX, 1.0, GAMMA_MAX]),
    }
}

/// Evaluates a fitted curve at `k`.
pub fn predict<T: Real>(fit: &ScalingFit<T>, k: usize) -> T {
    let floor = fit.floor.as_f64();
    let ceil = fit.ceil.as_f64();
    let kf = k.max(1) as f64;
    let e = (-fit.zeta.as_f64() * kf.powf(-fit.alpha.as_f64())).exp();
    let v = match fit.form {
        CurveForm::CoveragePower => 1.0,
        CurveForm::SelectionFull => {
            let q = (1.0 - fit.pi_eff.as_f64()).max(0.0);
            1.0 - q.powf(kf.powf(fit.gamma.as_f64()))
        }
    };
    T::lit(floor + (ceil - floor) * e * v)
}

fn check_points<T: Real>(points: &[CurvePoint<T>], min: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.len() < min {
        return Err(Error::InvalidArgument(format!(
            "need at least {min} curve points, got {}",
            points.len()
        )));
    }
    let mut ks = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for (idx, p) in points.iter().enumerate() {
        let v = p.value.as_f64();
        if p.k == 0 {
            return Err(Error::InvalidArgument("curve k must be >= 1".into()));
        }
        if idx > 0 && p.k <= points[idx - 1].k {
            return Err(Error::InvalidArgument(format!("curve k not strictly increasing at k = {}", p.k)));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("curve value {v} at k = {} outside [0, 1]", p.k)));
        }
        ks.push(p.k as f64);
        ys.push(v);
    }
    Ok((ks, ys))
}

fn r2_mse(pred: &[f64], ys: &[f64]) -> (f64, f64, bool) {
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let mse = ss_res / n;
    if ss_tot == 0.0 {
        (if ss_res == 0.0 { 1.0 } else { 0.0 }, mse, true)
    } else {
        (1.0 - ss_res / ss_tot, mse, false)
    }
}

fn starts(form: CurveForm, ys: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let (lo, hi) = bounds(form);
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor0 = (y_min * 0.9).clamp(0.0, 1.0);
    let range0 = if floor0 < 1.0 {
        ((y_max - floor0) / (1.0 - floor0)).clamp(0.05, 1.0)
    } else {
        0.5
    };
    let mut heuristic = vec![floor0, range0, 1.0, 0.5];
    if form == CurveForm::SelectionFull {
        heuristic.extend([0.5, 0.5]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![heuristic];
    for _ in 1..N_STARTS {
        out.push(lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect());
    }
    out
}

struct Candidate {
    x: Vec<f64>,
    delta: f64,
    mse: f64,
    converged: bool,
}

fn fit_form<T: Real>(points: &[CurvePoint<T>], form: CurveForm, min_points: usize) -> Result<ScalingFit<T>> {
    let (ks, ys) = check_points(points, min_points)?;
    let first = ys[0];
    if ys.iter().all(|&y| y == first) {
        return Ok(ScalingFit {
            form,
            floor: T::lit(first),
            ceil: T::lit(first),
            zeta: T::zero(),
            alpha: T::zero(),
            pi_eff: T::one(),
            gamma: T::zero(),
            delta: T::lit(DELTA_GRID[0]),
            r2: T::one(),
            mse: T::zero(),
            degenerate: true,
            converged: true,
        });
    }

    let (lo, hi) = bounds(form);
    let dim = lo.len();
    let n = ks.len() as f64;
    let opts = optimizer::Options::default();
    let mut best: Option<Candidate> = None;
    for &delta in &DELTA_GRID {
        let objective = |x: &[f64], g: &mut [f64]| {
            let theta = Theta::from_slice(form, x);
            let mut gk = vec![0.0; dim];
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut loss = 0.0;
            for (&k, &y) in ks.iter().zip(&ys) {
                let r = theta.eval(k, Some(&mut gk)) - y;
                loss += huber(r, delta);
                let w = huber_grad(r, delta);
                for (gi, gki) in g.iter_mut().zip(&gk) {
                    *gi += w * gki / n;
                }
            }
            loss / n
        };
        let mut best_for_delta: Option<optimizer::Outcome> = None;
        for x0 in starts(form, &ys, 0) {
            let out = optimizer::minimize(&objective, &x0, &lo, &hi, &opts);
            if !out.value.is_finite() {
                continue;
            }
            if best_for_delta.as_ref().is_none_or(|b| out.value < b.value) {
                best_for_delta = Some(out);
            }
        }
        let Some(out) = best_for_delta else { continue };
        let theta = Theta::from_slice(form, &out.x);
        let pred: Vec<f64> = ks.iter().map(|&k| theta.eval(k, None)).collect();
        let (_, mse, _) = r2_mse(&pred, &ys);
        if best.as_ref().is_none_or(|b| mse < b.mse) {
            best = Some(Candidate {
                x: out.x,
                delta,
                mse,
                converged: out.converged,
            });
        }
    }
    let best = best.ok_or_else(|| Error::OptimizerFailed("every start produced a non-finite loss".into()))?;
    let theta = Theta::from_slice(form, &best.x);
    let pred: Vec<f64> = ks.iter().map(|&k| theta.eval(k, None)).collect();
    let (r2, mse, degenerate) = r2_mse(&pred, &ys);
    Ok(ScalingFit {
        form,
        floor: T::lit(theta.floor),
        ceil: T::lit(theta.ceil()),
        zeta: T::lit(theta.zeta),
        alpha: T::lit(theta.alpha),
        pi_eff: T::lit(theta.pi),
        gamma: T::lit(theta.gamma),
        delta: T::lit(best.delta),
        r2: T::lit(r2),
        mse: T::lit(mse),
        degenerate,
        converged: best.converged,
    })
}

/// Fits `floor + (ceil - floor) * exp(-zeta * K^-alpha)`; needs at least 4 points.
pub fn fit_coverage_power<T: Real>(points: &[CurvePoint<T>]) -> Result<ScalingFit<T>> {
    fit_form(points, CurveForm::CoveragePower, 4)
}

/// Fits the full six-parameter selection curve; needs at least 6 points.
pub fn fit_selection_curve<T: Real>(points: &[CurvePoint<T>]) -> Result<ScalingFit<T>> {
    fit_form(points, CurveForm::SelectionFull, 6)
}

pub fn fit_curve<T: Real>(points: &[CurvePoint<T>], form: CurveForm) -> Result<ScalingFit<T>> {
    match form {
        CurveForm::CoveragePower => fit_coverage_power(points),
        CurveForm::SelectionFull => fit_selection_curve(points),
    }
}

#[derive(Deserialize)]
struct CurveRow {
    k: usize,
    value: f64,
    #[serde(default)]
    stderr: Option<f64>,
}

/// Reads a `k,value[,stderr]` CSV with a header row.
pub fn read_curve_csv<T: Real, R: Read>(reader: R) -> Result<Vec<CurvePoint<T>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<CurveRow>() {
        let row = row?;
        if !row.value.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite curve value at k = {}", row.k)));
        }
        out.push(CurvePoint {
            k: row.k,
            value: T::lit(row.value),
            stderr: row.stderr.map(T::lit),
        });
    }
    Ok(out)
}
