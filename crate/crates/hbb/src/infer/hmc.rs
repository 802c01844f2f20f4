//! Hamiltonian Monte Carlo with a diagonal mass matrix.
//!
//! Trajectories use a jittered number of leapfrog steps. During warmup the
//! step size follows dual averaging toward a target acceptance rate and the
//! inverse mass is re-estimated at the end of each slow window (an initial
//! fast buffer, doubling slow windows, and a terminal fast buffer).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Energy error above which a transition is a divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// Sampler settings for one chain.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HmcConfig {
    /// Warmup iterations.
    pub warmup: usize,
    /// Retained iterations.
    pub samples: usize,
    /// Dual-averaging acceptance target.
    pub target_accept: f64,
    /// Mean leapfrog steps; each trajectory draws uniformly from [L/2, 3L/2].
    pub n_leapfrog: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { warmup: 1000, samples: 1000, target_accept: 0.8, n_leapfrog: 16 }
    }
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    /// Retained draws.
    pub draws: Vec<Vec<f64>>,
    /// Divergent transitions after warmup.
    pub divergences: usize,
    /// Divergent transitions during warmup.
    pub warmup_divergences: usize,
    /// Adapted step size.
    pub step_size: f64,
    /// Adapted inverse mass diagonal.
    pub inv_mass: Vec<f64>,
    /// Mean acceptance statistic after warmup.
    pub mean_accept: f64,
}

struct DualAveraging {
    mu: f64,
    hbar: f64,
    log_eps_bar: f64,
    t: f64,
    delta: f64,
}

impl DualAveraging {
    fn new(eps: f64, delta: f64) -> Self {
        Self { mu: (10.0 * eps).ln(), hbar: 0.0, log_eps_bar: 0.0, t: 0.0, delta }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.hbar = (1.0 - w) * self.hbar + w * (self.delta - accept);
        let log_eps = self.mu - self.t.sqrt() / GAMMA * self.hbar;
        let eta = self.t.powf(-KAPPA);
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_eps(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Ends of the slow adaptation windows for a warmup length.
fn window_ends(warmup: usize) -> Vec<usize> {
    let (mut init, mut term, base) = (75usize, 50usize, 25usize);
    if warmup < init + term + base {
        init = warmup * 15 / 100;
        term = warmup / 10;
    }
    let slow_end = warmup.saturating_sub(term);
    let mut ends = Vec::new();
    let mut start = init;
    let mut size = if warmup < 150 { (slow_end.saturating_sub(init)).max(1) } else { base };
    while start < slow_end {
        let mut end = start + size;
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        start = end;
        size *= 2;
    }
    ends
}

fn hamiltonian(logp: f64, p: &[f64], inv_mass: &[f64]) -> f64 {
    -logp + 0.5 * p.iter().zip(inv_mass).map(|(pi, m)| pi * pi * m).sum::<f64>()
}

struct Transition {
    accept: f64,
    divergent: bool,
}

#[allow(clippy::too_many_arguments)]
fn leapfrog_transition<F>(
    lp: &F,
    x: &mut Vec<f64>,
    logp: &mut f64,
    grad: &mut Vec<f64>,
    eps: f64,
    steps: usize,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> Transition
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let d = x.len();
    let p0: Vec<f64> = inv_mass.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
    let h0 = hamiltonian(*logp, &p0, inv_mass);
    let mut xn = x.clone();
    let mut p = p0;
    let mut g = grad.clone();
    let mut lpn = *logp;
    for _ in 0..steps {
        for i in 0..d {
            p[i] += 0.5 * eps * g[i];
            xn[i] += eps * inv_mass[i] * p[i];
        }
        let (l, gn) = lp(&xn);
        lpn = l;
        g = gn;
        if !lpn.is_finite() {
            break;
        }
        for i in 0..d {
            p[i] += 0.5 * eps * g[i];
        }
    }
    let h1 = if lpn.is_finite() { hamiltonian(lpn, &p, inv_mass) } else { f64::INFINITY };
    let err = h1 - h0;
    let divergent = !err.is_finite() || err > DIVERGENCE_THRESHOLD;
    let accept = if err.is_nan() { 0.0 } else { (-err).exp().min(1.0) };
    if !divergent && rng.random::<f64>() < accept {
        *x = xn;
        *logp = lpn;
        *grad = g;
    }
    Transition { accept, divergent }
}

fn initial_step_size<F>(lp: &F, x: &[f64], logp: f64, grad: &[f64], inv_mass: &[f64], rng: &mut ChaCha8Rng) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut eps = 1.0;
    let d = x.len();
    let trial = |eps: f64, rng: &mut ChaCha8Rng| -> f64 {
        let p: Vec<f64> = inv_mass.iter().map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt()).collect();
        let h0 = hamiltonian(logp, &p, inv_mass);
        let mut pn = p.clone();
        let mut xn = x.to_vec();
        for i in 0..d {
            pn[i] += 0.5 * eps * grad[i];
            xn[i] += eps * inv_mass[i] * pn[i];
        }
        let (l, g) = lp(&xn);
        if !l.is_finite() {
            return f64::NEG_INFINITY;
        }
        for i in 0..d {
            pn[i] += 0.5 * eps * g[i];
        }
        h0 - hamiltonian(l, &pn, inv_mass)
    };
    let first = trial(eps, rng);
    let up = first > (0.5f64).ln();
    for _ in 0..50 {
        let v = trial(eps, rng);
        if up && !(v > (0.5f64).ln()) {
            break;
        }
        if !up && v > (0.5f64).ln() {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps
}

/// Runs one chain from `init` on the log density `lp` (value and gradient).
pub fn run_chain<F>(lp: &F, init: &[f64], cfg: &HmcConfig, seed: u64) -> ChainOutput
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = init.len();
    let mut x = init.to_vec();
    let (mut logp, mut grad) = lp(&x);
    let mut inv_mass = vec![1.0; d];
    let mut eps = initial_step_size(lp, &x, logp, &grad, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let ends = window_ends(cfg.warmup);
    let init_buf = if cfg.warmup < 150 { cfg.warmup * 15 / 100 } else { 75 };
    let mut win_start = init_buf;
    let mut next_end = ends.iter().copied();
    let mut cur_end = next_end.next();
    let (mut wsum, mut wsq, mut wn) = (vec![0.0; d], vec![0.0; d], 0usize);
    let mut warm_div = 0;
    let jitter = |rng: &mut ChaCha8Rng| -> usize {
        let l = cfg.n_leapfrog.max(1);
        rng.random_range((l / 2).max(1)..=l + l / 2)
    };
    for it in 0..cfg.warmup {
        let steps = jitter(&mut rng);
        let tr = leapfrog_transition(lp, &mut x, &mut logp, &mut grad, eps, steps, &inv_mass, &mut rng);
        if tr.divergent {
            warm_div += 1;
        }
        eps = da.update(tr.accept);
        if it >= win_start && cur_end.is_some() {
            wn += 1;
            for i in 0..d {
                wsum[i] += x[i];
                wsq[i] += x[i] * x[i];
            }
        }
        if Some(it + 1) == cur_end {
            let n = wn as f64;
            for i in 0..d {
                let m = wsum[i] / n;
                let v = (wsq[i] / n - m * m).max(0.0) * n / (n - 1.0).max(1.0);
                inv_mass[i] = (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0));
            }
            wsum.iter_mut().for_each(|v| *v = 0.0);
            wsq.iter_mut().for_each(|v| *v = 0.0);
            wn = 0;
            win_start = it + 1;
            cur_end = next_end.next();
            eps = initial_step_size(lp, &x, logp, &grad, &inv_mass, &mut rng);
            da = DualAveraging::new(eps, cfg.target_accept);
        }
    }
    if cfg.warmup > 0 {
        eps = da.final_eps();
    }
    let mut draws = Vec::with_capacity(cfg.samples);
    let mut div = 0;
    let mut acc = 0.0;
    for _ in 0..cfg.samples {
        let steps = jitter(&mut rng);
        let tr = leapfrog_transition(lp, &mut x, &mut logp, &mut grad, eps, steps, &inv_mass, &mut rng);
        if tr.divergent {
            div += 1;
        }
        acc += tr.accept;
        draws.push(x.clone());
    }
    ChainOutput {
        draws,
        divergences: div,
        warmup_divergences: warm_div,
        step_size: eps,
        inv_mass,
        mean_accept: acc / cfg.samples.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_slow_phase() {
        let e = window_ends(1000);
        assert_eq!(e.first(), Some(&100));
        assert_eq!(e.last(), Some(&950));
        assert!(e.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn correlated_gaussian() {
        let lp = |x: &[f64]| {
            let (a, b) = (x[0], x[1] / 3.0);
            (-0.5 * (a * a + b * b), vec![-a, -b / 3.0])
        };
        let cfg = HmcConfig { warmup: 500, samples: 2000, ..Default::default() };
        let out = run_chain(&lp, &[2.0, -2.0], &cfg, 3);
        let m1: f64 = out.draws.iter().map(|d| d[1]).sum::<f64>() / 2000.0;
        let v1: f64 = out.draws.iter().map(|d| (d[1] - m1).powi(2)).sum::<f64>() / 2000.0;
        assert!((v1 / 9.0 - 1.0).abs() < 0.2, "{v1}");
        assert_eq!(out.divergences, 0);
        assert!((out.inv_mass[1] / 9.0 - 1.0).abs() < 0.5);
    }
}
