//! Estimation engines: MAP with Laplace draws, HMC, and convergence diagnostics.
//!
//! `fit_map` has two modes. `Joint` maximizes the log posterior over every
//! flat coordinate with L-BFGS. `Marginal` integrates out (α, β, log κ, z, Γ)
//! with a Laplace approximation and maximizes the result over the
//! hyperparameters (log τ and correlation coordinates); the inner problem is
//! solved by Newton steps with the exact Hessian. Joint modes of
//! non-centered hierarchical models overstate τ, so `Marginal` is the
//! default whenever the hyperparameter block is small.

pub mod diagnostics;
pub mod hmc;
pub mod lbfgs;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use diagnostics::{ess_bulk, ess_tail, split_rhat};
pub use hmc::HmcConfig;

use crate::error::{Error, Result};
use crate::model::{validate_data, ModelStructure, Observation, ParamVector};
use crate::scores::{inner_indices, inner_neg_hessian, log_posterior, log_posterior_grad, neg_hessian_fd};

/// Hyperparameter blocks up to this size use the marginal mode by default.
pub const MARGINAL_AUTO_MAX_HYPER: usize = 4;

/// How hyperparameters are handled by [`fit_map`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HyperMode {
    /// Maximize over every coordinate jointly.
    Joint,
    /// Laplace-marginalize the inner coordinates, maximize over hyperparameters.
    Marginal,
}

/// Options for [`fit_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    /// Iteration cap for the outer optimizer.
    pub max_iter: usize,
    /// Gradient tolerance, scaled by 1 + |objective|.
    pub grad_tol: f64,
    /// Hyperparameter handling; `None` picks by block size.
    pub hyper_mode: Option<HyperMode>,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { max_iter: 1000, grad_tol: 1e-6, hyper_mode: None }
    }
}

/// Negative Hessian of the log posterior (likelihood plus prior) at the mode,
/// in flat coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeHessian {
    /// Symmetric matrix.
    pub matrix: DMatrix<f64>,
}

impl ModeHessian {
    /// Inverse of the matrix; errors when it is not positive definite.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let ch = self.matrix.clone().cholesky().ok_or_else(|| indefinite_report(&self.matrix))?;
        Ok(ch.inverse())
    }
}

fn indefinite_report(m: &DMatrix<f64>) -> Error {
    let ev = m.clone().symmetric_eigen().eigenvalues;
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let neg = ev.iter().filter(|&&v| v <= 0.0).count();
    Error::Numeric(format!("mode Hessian is not positive definite: {neg} non-positive eigenvalues, smallest {min:.3e}"))
}

/// Estimation engine tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Engine {
    /// MAP with optional Laplace draws.
    Map,
    /// Hamiltonian Monte Carlo.
    Mcmc,
}

/// Per-parameter convergence summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Parameter names.
    pub names: Vec<String>,
    /// Split R-hat per parameter.
    pub rhat: Vec<f64>,
    /// Bulk ESS per parameter.
    pub ess_bulk: Vec<f64>,
    /// Tail ESS per parameter.
    pub ess_tail: Vec<f64>,
}

impl Diagnostics {
    /// Largest finite R-hat.
    pub fn rhat_max(&self) -> f64 {
        self.rhat.iter().copied().filter(|v| !v.is_nan()).fold(f64::NAN, f64::max)
    }
}

/// Output of an estimation engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Engine used.
    pub engine: Engine,
    /// MAP or posterior mean.
    pub theta_hat: ParamVector,
    /// `theta_hat` flattened.
    pub flat_hat: Vec<f64>,
    /// Log posterior at `flat_hat` (MAP) or its mean over draws (MCMC).
    pub log_posterior: f64,
    /// Posterior draws (flat), chain-major; empty for MAP-only fits.
    pub draws: Vec<Vec<f64>>,
    /// Number of chains in `draws`.
    pub n_chains: usize,
    /// Curvature at the mode (MAP only).
    pub mode_hessian: Option<ModeHessian>,
    /// Convergence summary (MCMC with at least two chains).
    pub diagnostics: Option<Diagnostics>,
    /// Divergent transitions after warmup.
    pub divergence_count: usize,
    /// Seed used for draws.
    pub seed: Option<u64>,
    /// Optimizer iterations (MAP).
    pub iterations: usize,
    /// Hyperparameter handling (MAP).
    pub hyper_mode: Option<HyperMode>,
    /// Parameter names in flat order.
    pub names: Vec<String>,
}

impl FitResult {
    /// Splits `draws` into chains.
    pub fn chains(&self) -> Vec<Vec<Vec<f64>>> {
        if self.draws.is_empty() || self.n_chains == 0 {
            return Vec::new();
        }
        let per = self.draws.len() / self.n_chains;
        self.draws.chunks(per).map(|c| c.to_vec()).collect()
    }

    /// Draws as structured parameters.
    pub fn draw_params(&self, ms: &ModelStructure) -> Result<Vec<ParamVector>> {
        self.draws.iter().map(|d| ParamVector::from_flat(d, ms)).collect()
    }
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Data(format!("{} weights for {n} observations", w.len())));
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Data("weights must be non-negative and finite".into()));
        }
    }
    Ok(())
}

/// Default starting point: zero coefficients, log κ = 2, τ = 0.5, identity correlation.
pub fn default_init(ms: &ModelStructure) -> ParamVector {
    let mut th = ParamVector::zeros(ms);
    th.log_kappa = crate::model::LOG_KAPPA_PRIOR_MEAN;
    th.tau.iter_mut().for_each(|t| *t = 0.5);
    th
}

/// Posterior mode by quasi-Newton ascent.
///
/// `weights`, when given, should be normalized to sum to the sample size.
pub fn fit_map(
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    init: Option<&ParamVector>,
    opts: &MapOptions,
) -> Result<FitResult> {
    validate_data(data, ms)?;
    check_weights(weights, data.len())?;
    let start = match init {
        Some(t) => t.to_flat(ms)?,
        None => default_init(ms).to_flat(ms)?,
    };
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial values must be finite".into()));
    }
    let lay = ms.layout();
    let mode = opts.hyper_mode.unwrap_or(if lay.hyper().len() <= MARGINAL_AUTO_MAX_HYPER && !lay.hyper().is_empty() {
        HyperMode::Marginal
    } else {
        HyperMode::Joint
    });
    let (flat, iterations, hess) = match mode {
        HyperMode::Joint => fit_joint(data, weights, ms, &start, opts)?,
        HyperMode::Marginal => fit_marginal(data, weights, ms, &start, opts)?,
    };
    let theta_hat = ParamVector::from_flat(&flat, ms)?;
    Ok(FitResult {
        engine: Engine::Map,
        theta_hat,
        log_posterior: log_posterior(&flat, data, weights, ms),
        flat_hat: flat,
        draws: Vec::new(),
        n_chains: 0,
        mode_hessian: Some(ModeHessian { matrix: hess }),
        diagnostics: None,
        divergence_count: 0,
        seed: None,
        iterations,
        hyper_mode: Some(mode),
        names: lay.names(),
    })
}

fn fit_joint(
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    start: &[f64],
    opts: &MapOptions,
) -> Result<(Vec<f64>, usize, DMatrix<f64>)> {
    let fg = |x: &[f64]| {
        let (f, g) = log_posterior_grad(x, data, weights, ms);
        (-f, g.into_iter().map(|v| -v).collect())
    };
    let lo = lbfgs::LbfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol, ..Default::default() };
    let r = lbfgs::minimize(fg, start, &lo);
    if !r.converged {
        let gmax = r.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NotConverged {
            msg: format!("MAP did not converge after {} iterations (max |grad| {gmax:.3e})", r.iterations),
            best: r.x,
        });
    }
    let h = neg_hessian_fd(&r.x, data, weights, ms);
    if h.clone().cholesky().is_none() {
        return Err(indefinite_report(&h));
    }
    Ok((r.x, r.iterations, h))
}

/// Inner solution at fixed hyperparameters.
struct InnerSolution {
    u: Vec<f64>,
    logpost: f64,
    log_det: f64,
    hess: DMatrix<f64>,
}

struct Marginal<'a> {
    data: &'a [Observation],
    weights: Option<&'a [f64]>,
    ms: &'a ModelStructure,
    u_idx: Vec<usize>,
    h_idx: Vec<usize>,
    dim: usize,
}

impl Marginal<'_> {
    fn assemble(&self, u: &[f64], h: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        for (&i, &v) in self.u_idx.iter().zip(u) {
            x[i] = v;
        }
        for (&i, &v) in self.h_idx.iter().zip(h) {
            x[i] = v;
        }
        x
    }

    fn solve(&self, h: &[f64], u0: &[f64]) -> Result<InnerSolution> {
        let mut u = u0.to_vec();
        let mut x = self.assemble(&u, h);
        let (mut f, mut g) = log_posterior_grad(&x, self.data, self.weights, self.ms);
        for _ in 0..200 {
            let gu = DVector::from_iterator(u.len(), self.u_idx.iter().map(|&i| g[i]));
            let hm = inner_neg_hessian(&x, self.data, self.weights, self.ms);
            let step = damped_solve(&hm, &gu)?;
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let un: Vec<f64> = u.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                let xn = self.assemble(&un, h);
                let fnew = log_posterior(&xn, self.data, self.weights, self.ms);
                if fnew.is_finite() && fnew >= f - 1e-12 * (1.0 + f.abs()) {
                    u = un;
                    x = xn;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            let (fnew, gnew) = log_posterior_grad(&x, self.data, self.weights, self.ms);
            let small_step = step.amax() * t < 1e-10;
            f = fnew;
            g = gnew;
            let gmax = self.u_idx.iter().fold(0.0f64, |m, &i| m.max(g[i].abs()));
            if gmax < 1e-9 * (1.0 + f.abs()) || small_step || !moved {
                break;
            }
        }
        let hess = inner_neg_hessian(&x, self.data, self.weights, self.ms);
        let ch = hess
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("inner Hessian is not positive definite at the conditional mode".into()))?;
        let log_det = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(InnerSolution { u, logpost: f, log_det, hess })
    }
}

/// Solves H s = g, adding a ridge to H until a Cholesky factorization succeeds.
fn damped_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = h.clone().cholesky() {
        return Ok(c.solve(g));
    }
    let scale = h.diagonal().amax().max(1.0);
    let mut lam = 1e-8 * scale;
    for _ in 0..30 {
        let hd = h + DMatrix::identity(h.nrows(), h.ncols()) * lam;
        if let Some(c) = hd.cholesky() {
            return Ok(c.solve(g));
        }
        lam *= 10.0;
    }
    Err(Error::Numeric("Newton system could not be regularized".into()))
}

fn fit_marginal(
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    start: &[f64],
    opts: &MapOptions,
) -> Result<(Vec<f64>, usize, DMatrix<f64>)> {
    let lay = ms.layout();
    let u_idx = inner_indices(ms);
    let h_idx: Vec<usize> = lay.hyper().collect();
    let mg = Marginal { data, weights, ms, u_idx: u_idx.clone(), h_idx: h_idx.clone(), dim: lay.dim };
    let h0: Vec<f64> = h_idx.iter().map(|&i| start[i]).collect();
    let u0: Vec<f64> = u_idx.iter().map(|&i| start[i]).collect();
    let warm = std::cell::RefCell::new(mg.solve(&h0, &u0)?.u);
    let failure = std::cell::RefCell::new(None::<Error>);
    // −F(h) with F = log p(û, h | y) − ½ log det H(û, h).
    let neg_f = |h: &[f64]| -> f64 {
        let u0 = warm.borrow().clone();
        match mg.solve(h, &u0) {
            Ok(s) => {
                *warm.borrow_mut() = s.u;
                -(s.logpost - 0.5 * s.log_det)
            }
            Err(e) => {
                *failure.borrow_mut() = Some(e);
                f64::INFINITY
            }
        }
    };
    let fd_step = 1e-4;
    let fg = |h: &[f64]| -> (f64, Vec<f64>) {
        let f = neg_f(h);
        let mut g = vec![0.0; h.len()];
        let mut hh = h.to_vec();
        for j in 0..h.len() {
            let s = fd_step * (1.0 + h[j].abs());
            hh[j] = h[j] + s;
            let up = neg_f(&hh);
            hh[j] = h[j] - s;
            let dn = neg_f(&hh);
            hh[j] = h[j];
            g[j] = (up - dn) / (2.0 * s);
        }
        (f, g)
    };
    let lo = lbfgs::LbfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol, stall_tol: 1e-4, memory: 10 };
    let r = lbfgs::minimize(fg, &h0, &lo);
    if !r.converged {
        let best = mg.assemble(&warm.borrow(), &r.x);
        let msg = match failure.borrow().as_ref() {
            Some(e) => format!("marginal MAP did not converge after {} iterations ({e})", r.iterations),
            None => format!("marginal MAP did not converge after {} iterations", r.iterations),
        };
        return Err(Error::NotConverged { msg, best });
    }
    let hhat = r.x;
    let sol = mg.solve(&hhat, &warm.borrow().clone())?;
    // Hyperparameter curvature by second differences of −F.
    let d = hhat.len();
    let mut hh = DMatrix::zeros(d, d);
    let f0 = neg_f(&hhat);
    let st: Vec<f64> = hhat.iter().map(|v| 2e-3 * (1.0 + v.abs())).collect();
    let mut x = hhat.clone();
    for i in 0..d {
        x[i] = hhat[i] + st[i];
        let up = neg_f(&x);
        x[i] = hhat[i] - st[i];
        let dn = neg_f(&x);
        x[i] = hhat[i];
        hh[(i, i)] = (up - 2.0 * f0 + dn) / (st[i] * st[i]);
        for j in 0..i {
            let mut e = |si: f64, sj: f64| {
                x[i] = hhat[i] + si * st[i];
                x[j] = hhat[j] + sj * st[j];
                let v = neg_f(&x);
                x[i] = hhat[i];
                x[j] = hhat[j];
                v
            };
            let v = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * st[i] * st[j]);
            hh[(i, j)] = v;
            hh[(j, i)] = v;
        }
    }
    let flat = mg.assemble(&sol.u, &hhat);
    let mut full = DMatrix::zeros(lay.dim, lay.dim);
    for (a, &ia) in u_idx.iter().enumerate() {
        for (b, &ib) in u_idx.iter().enumerate() {
            full[(ia, ib)] = sol.hess[(a, b)];
        }
    }
    for (a, &ia) in h_idx.iter().enumerate() {
        for (b, &ib) in h_idx.iter().enumerate() {
            full[(ia, ib)] = hh[(a, b)];
        }
    }
    if full.clone().cholesky().is_none() {
        return Err(indefinite_report(&full));
    }
    Ok((flat, r.iterations, full))
}

/// Multivariate normal draws centred at the mode with covariance equal to
/// the inverse mode Hessian.
pub fn laplace_draws(fit: &FitResult, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let h = fit
        .mode_hessian
        .as_ref()
        .ok_or_else(|| Error::Structure("fit has no mode Hessian".into()))?;
    gaussian_draws(&fit.flat_hat, &h.matrix, m, seed)
}

/// Draws θ̂ + L⁻ᵀξ where H = LLᵀ.
pub fn gaussian_draws(mean: &[f64], precision: &DMatrix<f64>, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let ch = precision.clone().cholesky().ok_or_else(|| indefinite_report(precision))?;
    let lt = ch.l().transpose();
    let d = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let xi = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let v = lt
            .solve_upper_triangular(&xi)
            .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
        out.push(mean.iter().zip(v.iter()).map(|(a, b)| a + b).collect());
    }
    Ok(out)
}

/// MCMC configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Number of chains.
    pub chains: usize,
    /// Per-chain sampler settings.
    pub hmc: HmcConfig,
    /// Base seed; chain c uses a stream derived from (seed, c).
    pub seed: u64,
    /// Uniform jitter half-width around the initial point.
    pub init_jitter: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 4, hmc: HmcConfig::default(), seed: 1, init_jitter: 0.5 }
    }
}

/// Seed for stream `index` derived from a base seed (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Samples the (pseudo-)posterior with HMC in the flat coordinates.
pub fn sample_mcmc(
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    init: Option<&ParamVector>,
    cfg: &McmcConfig,
) -> Result<FitResult> {
    validate_data(data, ms)?;
    check_weights(weights, data.len())?;
    if cfg.chains == 0 || cfg.hmc.samples == 0 {
        return Err(Error::Structure("at least one chain and one sample are required".into()));
    }
    let base = match init {
        Some(t) => t.to_flat(ms)?,
        None => default_init(ms).to_flat(ms)?,
    };
    let lp = |x: &[f64]| log_posterior_grad(x, data, weights, ms);
    let outs: Vec<hmc::ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let seed = derive_seed(cfg.seed, c as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
            let x0: Vec<f64> = base
                .iter()
                .map(|v| v + cfg.init_jitter * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0))
                .collect();
            hmc::run_chain(&lp, &x0, &cfg.hmc, seed)
        })
        .collect();
    let warm_div: usize = outs.iter().map(|o| o.warmup_divergences).sum();
    if cfg.hmc.warmup > 0 && warm_div == cfg.chains * cfg.hmc.warmup {
        return Err(Error::Numeric("every warmup transition diverged; use a smaller step or a better initial point".into()));
    }
    let dim = base.len();
    let names = ms.layout().names();
    let diagnostics = (cfg.chains >= 2 && cfg.hmc.samples >= 4).then(|| {
        let per: Vec<(f64, f64, f64)> = (0..dim)
            .map(|j| {
                let ch: Vec<Vec<f64>> = outs.iter().map(|o| o.draws.iter().map(|d| d[j]).collect()).collect();
                (split_rhat(&ch), ess_bulk(&ch), ess_tail(&ch))
            })
            .collect();
        Diagnostics {
            names: names.clone(),
            rhat: per.iter().map(|p| p.0).collect(),
            ess_bulk: per.iter().map(|p| p.1).collect(),
            ess_tail: per.iter().map(|p| p.2).collect(),
        }
    });
    let draws: Vec<Vec<f64>> = outs.iter().flat_map(|o| o.draws.iter().cloned()).collect();
    let n = draws.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n).collect();
    let lpm = draws.iter().map(|d| log_posterior(d, data, weights, ms)).sum::<f64>() / n;
    Ok(FitResult {
        engine: Engine::Mcmc,
        theta_hat: ParamVector::from_flat(&mean, ms)?,
        flat_hat: mean,
        log_posterior: lpm,
        draws,
        n_chains: cfg.chains,
        mode_hessian: None,
        diagnostics,
        divergence_count: outs.iter().map(|o| o.divergences).sum(),
        seed: Some(cfg.seed),
        iterations: 0,
        hyper_mode: None,
        names,
    })
}
