//! Limited-memory BFGS minimizer with Armijo backtracking.

use std::collections::VecDeque;

/// Minimizer options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    /// Iteration cap.
    pub max_iter: usize,
    /// Converged when ‖g‖∞ ≤ grad_tol·(1 + |f|).
    pub grad_tol: f64,
    /// Correction pairs kept.
    pub memory: usize,
    /// A stalled line search still counts as converged when ‖g‖∞ ≤ stall_tol·(1 + |f|).
    pub stall_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { max_iter: 1000, grad_tol: 1e-6, memory: 10, stall_tol: 1e-4 }
    }
}

/// Minimizer outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Final iterate.
    pub x: Vec<f64>,
    /// Objective at `x`.
    pub f: f64,
    /// Gradient at `x`.
    pub grad: Vec<f64>,
    /// Accepted steps.
    pub iterations: usize,
    /// Whether a stopping test was met.
    pub converged: bool,
    /// Objective after each accepted step, starting with f(x0).
    pub history: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `fg`, which returns the objective and its gradient.
pub fn minimize<F>(mut fg: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = vec![f];
    let mut iterations = 0;
    let done = |f: f64, g: &[f64], tol: f64| f.is_finite() && inf_norm(g) <= tol * (1.0 + f.abs());
    while iterations < opts.max_iter {
        if done(f, &g, opts.grad_tol) {
            return LbfgsResult { x, f, grad: g, iterations, converged: true, history };
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in &mut d {
                *di *= gamma;
            }
        } else {
            let scale = 1.0 / inf_norm(&g).max(1.0);
            for di in &mut d {
                *di *= scale;
            }
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v / inf_norm(&g).max(1.0)).collect();
            slope = dot(&g, &d);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (fn_, gn) = fg(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * t * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fn_, gn)) => {
                let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    hist.push_back((s, y, 1.0 / sy));
                    if hist.len() > opts.memory {
                        hist.pop_front();
                    }
                }
                x = xn;
                f = fn_;
                g = gn;
                iterations += 1;
                history.push(f);
            }
            None => {
                let ok = done(f, &g, opts.stall_tol);
                return LbfgsResult { x, f, grad: g, iterations, converged: ok, history };
            }
        }
    }
    let ok = done(f, &g, opts.grad_tol);
    LbfgsResult { x, f, grad: g, iterations, converged: ok, history }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            (f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
        };
        let r = minimize(fg, &[-1.2, 1.0], &LbfgsOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_exact() {
        let fg = |x: &[f64]| {
            let f = 0.5 * (3.0 * x[0] * x[0] + x[1] * x[1] + x[0] * x[1]) - x[0];
            (f, vec![3.0 * x[0] + 0.5 * x[1] - 1.0, x[1] + 0.5 * x[0]])
        };
        let r = minimize(fg, &[5.0, -3.0], &LbfgsOptions { grad_tol: 1e-12, ..Default::default() });
        // Solution of [[3, .5], [.5, 1]] x = (1, 0).
        let det = 3.0 - 0.25;
        assert!((r.x[0] - 1.0 / det).abs() < 1e-10 && (r.x[1] + 0.5 / det).abs() < 1e-10);
    }
}
