//! Analytic scores and observed information.
//!
//! Each observation's log-density depends on the parameters only through
//! (η_ext, η_int, log κ). [`eta_derivs`] returns its first and second
//! derivatives in those three coordinates; every other gradient and Hessian
//! in the crate is a chain rule on top of it.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bbkernel::{log_pmf_unchecked, BetaBinParams};
use crate::error::{Error, Result};
use crate::lkj;
use crate::model::{
    eta_flat, log_prior_flat, log_prior_grad_flat, loglik_flat, ModelStructure, Observation, ParamVector, Unpacked,
};
use crate::special::{digamma_diff, expit, ln_one_minus_exp, softplus, trigamma_diff};

/// Log-density of one observation and its derivatives in (η_ext, η_int, log κ).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EtaDerivs {
    /// Extensive log-density.
    pub ext: f64,
    /// Intensive log-density (0 when y = 0).
    pub int: f64,
    /// ∂/∂η_ext.
    pub ge: f64,
    /// ∂/∂η_int.
    pub gi: f64,
    /// ∂/∂log κ.
    pub gk: f64,
    /// ∂²/∂η_ext².
    pub hee: f64,
    /// ∂²/∂η_int².
    pub hii: f64,
    /// ∂²/∂η_int∂log κ.
    pub hik: f64,
    /// ∂²/∂log κ².
    pub hkk: f64,
}

/// Derivatives of log f_HBB for one observation.
///
/// The intensive part is log f_BB(y) − log(1 − p0) differentiated in
/// (μ, ρ = log κ) and then pushed through μ = expit(η_int).
pub fn eta_derivs(obs: &Observation, eta_ext: f64, eta_int: f64, log_kappa: f64) -> EtaDerivs {
    let q = expit(eta_ext);
    let z = if obs.y > 0 { 1.0 } else { 0.0 };
    let mut d = EtaDerivs {
        ext: if obs.y > 0 { -softplus(-eta_ext) } else { -softplus(eta_ext) },
        ge: z - q,
        hee: -q * (1.0 - q),
        ..Default::default()
    };
    if obs.y == 0 {
        return d;
    }
    let (cell, _) = BetaBinParams::clamped(obs.n, expit(eta_int), log_kappa.exp());
    let (n, y) = (obs.n, obs.y);
    let (mu, kappa) = (cell.mu, cell.kappa);
    let (a, b) = (cell.a(), cell.b());

    let a1 = digamma_diff(a, y);
    let b1 = digamma_diff(b, n - y);
    let k1 = digamma_diff(kappa, n);
    let a2 = trigamma_diff(a, y);
    let b2 = trigamma_diff(b, n - y);
    let k2 = trigamma_diff(kappa, n);

    let b_mu = kappa * (a1 - b1);
    let b_rho = kappa * (mu * a1 + (1.0 - mu) * b1 - k1);
    let b_mumu = -kappa * kappa * (a2 + b2);
    let b_murho = b_mu + kappa * kappa * (-mu * a2 + (1.0 - mu) * b2);
    let b_rhorho = b_rho + kappa * kappa * (-mu * mu * a2 - (1.0 - mu) * (1.0 - mu) * b2 + k2);

    // log p0 = Σ_{j<n} log((b+j)/(κ+j)) and its derivatives.
    let (mut lp0, mut s_b1, mut s_b2) = (0.0, 0.0, 0.0);
    let (mut s_rho, mut s_murho, mut s_rhorho) = (0.0, 0.0, 0.0);
    for j in 0..n {
        let jf = f64::from(j);
        let (bj, kj) = (b + jf, kappa + jf);
        lp0 += (-a / kj).ln_1p();
        s_b1 += 1.0 / bj;
        s_b2 += 1.0 / (bj * bj);
        s_rho += jf / (bj * kj);
        s_murho += jf / (bj * bj);
        s_rhorho += jf * (b / (bj * bj) - kappa / (kj * kj));
    }
    let l_mu = -kappa * s_b1;
    let l_rho = -kappa * mu * s_rho;
    let l_mumu = -kappa * kappa * s_b2;
    let l_murho = -kappa * s_murho;
    let l_rhorho = s_rhorho;

    // T = −log(1 − p0): T_a = r L_a, T_ab = r L_ab + r2 L_a L_b.
    let p0 = lp0.exp();
    let r = p0 / (1.0 - p0);
    let r2 = r / (1.0 - p0);

    let f_mu = b_mu + r * l_mu;
    let f_rho = b_rho + r * l_rho;
    let f_mumu = b_mumu + r * l_mumu + r2 * l_mu * l_mu;
    let f_murho = b_murho + r * l_murho + r2 * l_mu * l_rho;
    let f_rhorho = b_rhorho + r * l_rhorho + r2 * l_rho * l_rho;

    let m = mu * (1.0 - mu);
    d.int = log_pmf_unchecked(&cell, y) - ln_one_minus_exp(lp0);
    d.gi = f_mu * m;
    d.gk = f_rho;
    d.hii = f_mumu * m * m + f_mu * m * (1.0 - 2.0 * mu);
    d.hik = f_murho * m;
    d.hkk = f_rhorho;
    d
}

/// Adds the weighted log-likelihood gradient in flat coordinates into `out`.
pub(crate) fn loglik_grad_flat(
    flat: &[f64],
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    out: &mut [f64],
) -> f64 {
    let lay = ms.layout();
    let un = Unpacked::new(flat, ms);
    let (p, q, k) = (ms.p, ms.q, ms.dim_re());
    let lk = flat[lay.log_kappa];
    let mut dsum = vec![0.0; ms.s * k];
    let mut total = 0.0;
    for (i, obs) in data.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (ee, ei) = eta_flat(flat, &un.delta, obs, ms);
        let d = eta_derivs(obs, ee, ei, lk);
        total += w * (d.ext + d.int);
        let (ge, gi) = (w * d.ge, w * d.gi);
        for c in 0..p {
            out[lay.alpha.start + c] += ge * obs.x[c];
            out[lay.beta.start + c] += gi * obs.x[c];
        }
        out[lay.log_kappa] += w * d.gk;
        if k > 0 {
            let ds = &mut dsum[obs.state * k..(obs.state + 1) * k];
            for r in 0..q {
                ds[r] += ge * obs.x[r];
                ds[q + r] += gi * obs.x[r];
            }
        }
    }
    if k > 0 {
        chain_deviations(flat, &dsum, &un, ms, out);
    }
    total
}

/// Chains ∂/∂δ_s (state-major, `dsum`) to log τ, correlation, z and Γ.
fn chain_deviations(flat: &[f64], dsum: &[f64], un: &Unpacked, ms: &ModelStructure, out: &mut [f64]) {
    let lay = ms.layout();
    let (q, k) = (ms.q, ms.dim_re());
    let mut gl = DMatrix::zeros(k, k);
    for s in 0..ms.s {
        let ds = &dsum[s * k..(s + 1) * k];
        let zs = &flat[lay.z.start + s * k..lay.z.start + (s + 1) * k];
        for i in 0..k {
            let di = ds[i];
            if di == 0.0 {
                continue;
            }
            out[lay.log_tau.start + i] += di * un.eps[s * k + i];
            let dt = di * un.tau[i];
            for c in 0..=i {
                out[lay.z.start + s * k + c] += dt * un.l[(i, c)];
                gl[(i, c)] += dt * zs[c];
            }
        }
        if let Some(v) = &ms.policy {
            for m in 0..2 {
                for r in 0..q {
                    let di = ds[m * q + r];
                    for c in 0..ms.q_policy {
                        out[lay.gamma_index(m, r, c)] += di * v[(s, c)];
                    }
                }
            }
        }
    }
    let free = &flat[lay.corr.clone()];
    let gout = &mut out[lay.corr.clone()];
    if ms.cross_margin {
        lkj::chain_to_free(free, k, &gl, gout);
    } else {
        let nb = lkj::n_free(q);
        for m in 0..2 {
            let blk = gl.view((m * q, m * q), (q, q)).into_owned();
            lkj::chain_to_free(&free[m * nb..(m + 1) * nb], q, &blk, &mut gout[m * nb..(m + 1) * nb]);
        }
    }
}

/// Log posterior (weighted log-likelihood plus log prior) and its flat gradient.
pub fn log_posterior_grad(flat: &[f64], data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; flat.len()];
    let ll = loglik_grad_flat(flat, data, weights, ms, &mut g);
    log_prior_grad_flat(flat, ms, &mut g);
    (ll + log_prior_flat(flat, ms), g)
}

/// Log posterior value only.
pub fn log_posterior(flat: &[f64], data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> f64 {
    loglik_flat(flat, data, weights, ms).total + log_prior_flat(flat, ms)
}

/// Gradient of one observation's log-density with respect to the flat parameter vector.
///
/// ```
/// use hbb::model::*;
/// let ms = ModelStructure::new(Variant::M0, 2, 1, None).unwrap();
/// let obs = Observation { y: 0, n: 6, x: vec![1.0, 0.5], state: 0, stratum: 0, psu: 0, w_raw: 1.0 };
/// let s = hbb::scores::score_obs(&ParamVector::zeros(&ms), &obs, &ms).unwrap();
/// assert_eq!(s, vec![-0.5, -0.25, 0.0, 0.0, 0.0]);
/// ```
pub fn score_obs(theta: &ParamVector, obs: &Observation, ms: &ModelStructure) -> Result<Vec<f64>> {
    let flat = theta.to_flat(ms)?;
    crate::model::check_observation(obs, ms)?;
    let mut g = vec![0.0; flat.len()];
    loglik_grad_flat(&flat, std::slice::from_ref(obs), None, ms, &mut g);
    Ok(g)
}

/// Coordinates used by score matrices and observed information:
/// α, β, log κ and optionally every state deviation δ_s.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreIndex {
    /// Covariate count.
    pub p: usize,
    /// State-varying prefix length.
    pub q: usize,
    /// State count covered by deviation columns (0 when excluded).
    pub s: usize,
    /// Column names.
    pub names: Vec<String>,
}

impl ScoreIndex {
    /// Builds the index; `with_deviations` appends S·2q deviation columns.
    pub fn new(ms: &ModelStructure, with_deviations: bool) -> Self {
        let s = if with_deviations && ms.q > 0 { ms.s } else { 0 };
        let mut names: Vec<String> = ms.layout().names()[..2 * ms.p + 1].to_vec();
        for st in 0..s {
            for m in ["ext", "int"] {
                for r in 0..ms.q {
                    names.push(format!("delta_{m}[{st},{r}]"));
                }
            }
        }
        Self { p: ms.p, q: ms.q, s, names }
    }

    /// Number of coordinates.
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Length of the fixed-effect block.
    pub fn fixed_dim(&self) -> usize {
        2 * self.p + 1
    }

    fn delta(&self, s: usize, margin: usize, r: usize) -> usize {
        self.fixed_dim() + s * 2 * self.q + margin * self.q + r
    }
}

/// Per-observation unweighted scores in [`ScoreIndex`] coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// One row per observation.
    pub rows: Vec<Vec<f64>>,
    /// Column map.
    pub index: ScoreIndex,
}

impl ScoreMatrix {
    /// Writes a CSV with a header of parameter names and 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header: Vec<String> = self.index.names.iter().map(|n| if n.contains(',') { format!("\"{n}\"") } else { n.clone() }).collect();
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| fmt17(*v)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Unweighted per-observation scores at θ.
pub fn score_matrix(theta: &ParamVector, data: &[Observation], ms: &ModelStructure, with_deviations: bool) -> Result<ScoreMatrix> {
    theta.validate(ms)?;
    crate::model::validate_data(data, ms)?;
    let index = ScoreIndex::new(ms, with_deviations);
    let deltas = theta.state_deviations(ms);
    let p = ms.p;
    let rows = data
        .iter()
        .map(|obs| {
            let ds: &[f64] = if ms.q > 0 { &deltas[obs.state] } else { &[] };
            let (ee, ei) = crate::model::predictors_at(&theta.alpha, &theta.beta, ds, obs, ms.q);
            let d = eta_derivs(obs, ee, ei, theta.log_kappa);
            let mut row = vec![0.0; index.dim()];
            for c in 0..p {
                row[c] = d.ge * obs.x[c];
                row[p + c] = d.gi * obs.x[c];
            }
            row[2 * p] = d.gk;
            if index.s > 0 {
                for r in 0..ms.q {
                    row[index.delta(obs.state, 0, r)] = d.ge * obs.x[r];
                    row[index.delta(obs.state, 1, r)] = d.gi * obs.x[r];
                }
            }
            row
        })
        .collect();
    Ok(ScoreMatrix { rows, index })
}

/// Negative Hessian of the weighted log-likelihood, prior curvature excluded.
///
/// Kept distinct from the optimizer's mode Hessian, which includes the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedInformation {
    /// Symmetric matrix in [`ScoreIndex`] coordinates.
    pub matrix: DMatrix<f64>,
    /// Column map.
    pub index: ScoreIndex,
}

impl ObservedInformation {
    /// True when a Cholesky factorization succeeds.
    pub fn is_positive_definite(&self) -> bool {
        self.matrix.clone().cholesky().is_some()
    }

    /// Fixed-effect (α, β, log κ) sub-block.
    pub fn fixed_block(&self) -> DMatrix<f64> {
        let f = self.index.fixed_dim();
        self.matrix.view((0, 0), (f, f)).into_owned()
    }
}

/// H_obs = −∂²ℓ_w/∂θ∂θᵀ at θ over α, β, log κ and optionally the state deviations.
pub fn hessian(
    theta: &ParamVector,
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
    with_deviations: bool,
) -> Result<ObservedInformation> {
    theta.validate(ms)?;
    crate::model::validate_data(data, ms)?;
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::Data(format!("{} weights for {} observations", w.len(), data.len())));
        }
    }
    let index = ScoreIndex::new(ms, with_deviations);
    let deltas = theta.state_deviations(ms);
    let (p, q) = (ms.p, ms.q);
    let dim = index.dim();
    let mut h = DMatrix::zeros(dim, dim);
    let mut ext_cols: Vec<(usize, f64)> = Vec::with_capacity(p + q);
    let mut int_cols: Vec<(usize, f64)> = Vec::with_capacity(p + q);
    for (i, obs) in data.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let ds: &[f64] = if q > 0 { &deltas[obs.state] } else { &[] };
        let (ee, ei) = crate::model::predictors_at(&theta.alpha, &theta.beta, ds, obs, q);
        let d = eta_derivs(obs, ee, ei, theta.log_kappa);
        ext_cols.clear();
        int_cols.clear();
        for c in 0..p {
            ext_cols.push((c, obs.x[c]));
            int_cols.push((p + c, obs.x[c]));
        }
        if index.s > 0 {
            for r in 0..q {
                ext_cols.push((index.delta(obs.state, 0, r), obs.x[r]));
                int_cols.push((index.delta(obs.state, 1, r), obs.x[r]));
            }
        }
        for &(a, xa) in &ext_cols {
            for &(b, xb) in &ext_cols {
                if b <= a {
                    h[(a, b)] -= w * d.hee * xa * xb;
                }
            }
        }
        if obs.y > 0 {
            let kk = 2 * p;
            for &(a, xa) in &int_cols {
                for &(b, xb) in &int_cols {
                    if b <= a {
                        h[(a, b)] -= w * d.hii * xa * xb;
                    }
                }
                // κ row sits below β and above δ columns.
                if a > kk {
                    h[(a, kk)] -= w * d.hik * xa;
                } else {
                    h[(kk, a)] -= w * d.hik * xa;
                }
            }
            h[(kk, kk)] -= w * d.hkk;
        }
    }
    for a in 0..dim {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    Ok(ObservedInformation { matrix: h, index })
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Its parameter name.
    pub worst_name: String,
    /// |analytic − numeric| / max(1, |analytic|, |numeric|) at that coordinate.
    pub max_rel_error: f64,
    /// Analytic gradient of the log posterior.
    pub analytic: Vec<f64>,
}

/// Compares the analytic log-posterior gradient with central differences.
///
/// Step per coordinate is 1e-5·(1 + |θ_p|).
pub fn check_grad(theta: &ParamVector, data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> Result<GradCheck> {
    let flat = theta.to_flat(ms)?;
    crate::model::validate_data(data, ms)?;
    let (_, g) = log_posterior_grad(&flat, data, weights, ms);
    let names = ms.layout().names();
    let mut worst = (0, 0.0);
    let mut x = flat.clone();
    for j in 0..flat.len() {
        let h = 1e-5 * (1.0 + flat[j].abs());
        x[j] = flat[j] + h;
        let up = log_posterior(&x, data, weights, ms);
        x[j] = flat[j] - h;
        let dn = log_posterior(&x, data, weights, ms);
        x[j] = flat[j];
        let fd = (up - dn) / (2.0 * h);
        let err = (fd - g[j]).abs() / 1f64.max(fd.abs()).max(g[j].abs());
        if err > worst.1 || j == 0 {
            worst = (j, err);
        }
    }
    Ok(GradCheck { worst_index: worst.0, worst_name: names[worst.0].clone(), max_rel_error: worst.1, analytic: g })
}

/// Non-hyperparameter coordinates (α, β, log κ, z, Γ) of the flat vector.
pub(crate) fn inner_indices(ms: &ModelStructure) -> Vec<usize> {
    let lay = ms.layout();
    let hy = lay.hyper();
    (0..lay.dim).filter(|i| !hy.contains(i)).collect()
}

/// Negative log-posterior Hessian over the inner coordinates at fixed hyperparameters.
///
/// The predictors are linear in these coordinates, so the Hessian is
/// Σ w_i J_iᵀ(−∇²ℓ_i)J_i plus the diagonal Gaussian prior precision, exactly.
pub(crate) fn inner_neg_hessian(flat: &[f64], data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> DMatrix<f64> {
    let lay = ms.layout();
    let hy = lay.hyper();
    let nh = hy.len();
    let to_u = |i: usize| if i >= hy.end { i - nh } else { i };
    let dim = lay.dim - nh;
    let un = Unpacked::new(flat, ms);
    let (p, q, k) = (ms.p, ms.q, ms.dim_re());
    let lk = flat[lay.log_kappa];
    let mut h = DMatrix::zeros(dim, dim);
    // Entries (u-index, ∂η_ext, ∂η_int, ∂ρ).
    let mut jac: Vec<(usize, f64, f64, f64)> = Vec::new();
    let kk = to_u(lay.log_kappa);
    for (i, obs) in data.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let (ee, ei) = eta_flat(flat, &un.delta, obs, ms);
        let d = eta_derivs(obs, ee, ei, lk);
        jac.clear();
        for c in 0..p {
            jac.push((to_u(lay.alpha.start + c), obs.x[c], 0.0, 0.0));
        }
        if obs.y > 0 {
            for c in 0..p {
                jac.push((to_u(lay.beta.start + c), 0.0, obs.x[c], 0.0));
            }
            jac.push((kk, 0.0, 0.0, 1.0));
        }
        if k > 0 {
            let s = obs.state;
            for c in 0..k {
                let (mut je, mut ji) = (0.0, 0.0);
                for r in 0..q {
                    je += obs.x[r] * un.tau[r] * un.l[(r, c)];
                    ji += obs.x[r] * un.tau[q + r] * un.l[(q + r, c)];
                }
                if obs.y == 0 {
                    ji = 0.0;
                }
                if je != 0.0 || ji != 0.0 {
                    jac.push((to_u(lay.z.start + s * k + c), je, ji, 0.0));
                }
            }
            if let Some(v) = &ms.policy {
                for r in 0..q {
                    for c in 0..ms.q_policy {
                        let g = obs.x[r] * v[(s, c)];
                        jac.push((to_u(lay.gamma_index(0, r, c)), g, 0.0, 0.0));
                        if obs.y > 0 {
                            jac.push((to_u(lay.gamma_index(1, r, c)), 0.0, g, 0.0));
                        }
                    }
                }
            }
        }
        for &(a, ea, ia, ka) in &jac {
            for &(b, eb, ib, kb) in &jac {
                if b > a {
                    continue;
                }
                let v = d.hee * ea * eb + d.hii * ia * ib + d.hik * (ia * kb + ka * ib) + d.hkk * ka * kb;
                h[(a, b)] -= w * v;
            }
        }
    }
    let prec = crate::model::prior_precision_diag(ms);
    for (i, pv) in prec.iter().enumerate() {
        if !hy.contains(&i) {
            let u = to_u(i);
            h[(u, u)] += pv;
        }
    }
    for a in 0..dim {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    h
}

/// Central-difference Jacobian of the analytic gradient (symmetrized), negated.
pub(crate) fn neg_hessian_fd(flat: &[f64], data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> DMatrix<f64> {
    let d = flat.len();
    let mut h = DMatrix::zeros(d, d);
    let mut x = flat.to_vec();
    for j in 0..d {
        let st = 1e-5 * (1.0 + flat[j].abs());
        x[j] = flat[j] + st;
        let (_, gu) = log_posterior_grad(&x, data, weights, ms);
        x[j] = flat[j] - st;
        let (_, gd) = log_posterior_grad(&x, data, weights, ms);
        x[j] = flat[j];
        for i in 0..d {
            h[(i, j)] = -(gu[i] - gd[i]) / (2.0 * st);
        }
    }
    let ht = h.transpose();
    (h + ht) * 0.5
}
