//! Box-constrained quasi-Newton minimizer.
//!
//! Projected BFGS: variables sitting on a bound whose gradient points outward
//! are frozen for the step, the inverse-Hessian approximation drives the free
//! ones, and a backtracking search runs along the projected path.

#[derive(Clone, Debug)]
pub(crate) struct Options {
    pub max_iters: usize,
    /// Stop once the projected gradient's infinity norm drops below this.
    pub grad_tol: f64,
    /// Stop once the decrease, relative to `max(|f|, 1)`, stays below this
    /// for five consecutive steps.
    pub rel_tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            grad_tol: 1e-10,
            rel_tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| ((xi - gi).clamp(l, h) - xi).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over the box `[lo, hi]`. `f` writes its gradient into the
/// second argument and returns the objective.
pub(crate) fn minimize<F>(f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &Options) -> Outcome
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() {
        return Outcome {
            x,
            value: fx,
            converged: false,
        };
    }
    let identity = |h: &mut Vec<f64>| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
    };
    let mut h = vec![0.0; n * n];
    identity(&mut h);
    let mut g_new = vec![0.0; n];
    let mut stalls = 0;

    for _ in 0..opts.max_iters {
        if projected_grad_norm(&x, &g, lo, hi) < opts.grad_tol {
            return Outcome {
                x,
                value: fx,
                converged: true,
            };
        }
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let mut d = vec![0.0; n];
        for i in (0..n).filter(|&i| free[i]) {
            d[i] = -(0..n).filter(|&j| free[j]).map(|j| h[i * n + j] * g[j]).sum::<f64>();
        }
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 || !slope.is_finite() {
            identity(&mut h);
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                return Outcome {
                    x,
                    value: fx,
                    converged: true,
                };
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut trial, lo, hi);
            let moved: f64 = trial.iter().zip(&x).zip(&g).map(|((t, a), gi)| (t - a) * gi).sum();
            let ft = f(&trial, &mut g_new);
            if ft.is_finite() && ft <= fx + 1e-4 * moved.min(0.0) && ft <= fx {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no progress along the quasi-Newton path; one more chance from steepest descent
            if h.iter().enumerate().all(|(idx, &v)| v == if idx % (n + 1) == 0 { 1.0 } else { 0.0 }) {
                return Outcome {
                    x,
                    value: fx,
                    converged: true,
                };
            }
            identity(&mut h);
            continue;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-300 {
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }

        let decrease = fx - f_new;
        x = x_new;
        g.copy_from_slice(&g_new);
        let scale = fx.abs().max(f_new.abs()).max(1.0);
        fx = f_new;
        if decrease <= opts.rel_tol * scale {
            stalls += 1;
            if stalls >= 5 {
                return Outcome {
                    x,
                    value: fx,
                    converged: true,
                };
            }
        } else {
            stalls = 0;
        }
    }
    Outcome {
        x,
        value: fx,
        converged: false,
    }
}
