//! Hierarchical hurdle beta-binomial model.
//!
//! Participation follows logit(q_i) = x_iᵀα + x_i^(r)ᵀδ_{1,s} and the
//! positive counts follow a zero-truncated beta-binomial with
//! logit(μ_i) = x_iᵀβ + x_i^(r)ᵀδ_{2,s}, where x^(r) is the first q entries
//! of x. State deviations use a non-centered form
//! δ_s = diag(τ) L z_s (+ Γ_k v_s per margin for M3b).
//!
//! The flat parameter order is
//! `[α | β | log κ | log τ | correlation free entries | z by state | vec Γ₁ | vec Γ₂]`.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bbkernel::{intensity_report, log_pmf_unchecked, log_positive_prob, BetaBinParams};
use crate::error::{Error, Result};
use crate::lkj;
use crate::special::{expit, softplus, KahanSum};

/// LKJ shape used for the state-deviation correlation prior.
pub const LKJ_ETA: f64 = 2.0;
/// Prior standard deviation of α and β entries.
pub const COEF_PRIOR_SD: f64 = 2.0;
/// Prior mean of log κ.
pub const LOG_KAPPA_PRIOR_MEAN: f64 = 2.0;
/// Prior standard deviation of log κ.
pub const LOG_KAPPA_PRIOR_SD: f64 = 1.5;
/// Prior standard deviation of Γ entries outside the intercept column.
pub const GAMMA_PRIOR_SD: f64 = 1.0;
/// Prior standard deviation of the Γ intercept column.
pub const GAMMA_INTERCEPT_PRIOR_SD: f64 = 0.5;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// One provider record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Count, 0 ≤ y ≤ n.
    pub y: u32,
    /// Denominator, at least 1.
    pub n: u32,
    /// Covariates; the first entry is the intercept 1.
    pub x: Vec<f64>,
    /// State index, 0-based.
    pub state: usize,
    /// Stratum index, 0-based.
    pub stratum: usize,
    /// Primary sampling unit id, unique within its stratum.
    pub psu: usize,
    /// Raw sampling weight.
    pub w_raw: f64,
}

impl Observation {
    /// Participation indicator 1(y > 0).
    pub fn z(&self) -> bool {
        self.y > 0
    }
}

/// Nested model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Fixed effects only.
    M0,
    /// Random intercepts per margin, block-diagonal.
    M1,
    /// All coefficients state-varying, block-diagonal correlation.
    M2,
    /// All coefficients state-varying with cross-margin correlation.
    M3a,
    /// M3a plus policy moderators Γ_k v_s.
    M3b,
}

impl Variant {
    /// All variants in nesting order.
    pub const ALL: [Variant; 5] = [Variant::M0, Variant::M1, Variant::M2, Variant::M3a, Variant::M3b];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::M0 => "m0",
            Variant::M1 => "m1",
            Variant::M2 => "m2",
            Variant::M3a => "m3a",
            Variant::M3b => "m3b",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m0" => Ok(Variant::M0),
            "m1" => Ok(Variant::M1),
            "m2" => Ok(Variant::M2),
            "m3a" => Ok(Variant::M3a),
            "m3b" => Ok(Variant::M3b),
            other => Err(Error::Structure(format!("unknown variant '{other}'"))),
        }
    }
}

/// Dimensions and options of one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    /// Variant tag.
    pub variant: Variant,
    /// Covariate count including the intercept.
    pub p: usize,
    /// Length of the state-varying covariate prefix.
    pub q: usize,
    /// Number of states.
    pub s: usize,
    /// Policy vector length (M3b only, else 0).
    pub q_policy: usize,
    /// Whether the deviation correlation couples the two margins.
    pub cross_margin: bool,
    /// State-by-policy matrix, row s is v_s (M3b only).
    pub policy: Option<DMatrix<f64>>,
}

impl ModelStructure {
    /// Builds the structure for a variant.
    ///
    /// M3b requires an S×Q policy matrix whose first column is all ones.
    pub fn new(variant: Variant, p: usize, s: usize, policy: Option<DMatrix<f64>>) -> Result<Self> {
        if p == 0 {
            return Err(Error::Structure("at least the intercept covariate is required".into()));
        }
        let (q, cross) = match variant {
            Variant::M0 => (0, false),
            Variant::M1 => (1, false),
            Variant::M2 => (p, false),
            Variant::M3a | Variant::M3b => (p, true),
        };
        if q > 0 && s == 0 {
            return Err(Error::Structure("state-varying variants need at least one state".into()));
        }
        let (q_policy, policy) = match variant {
            Variant::M3b => {
                let v = policy.ok_or_else(|| Error::Structure("M3b requires a policy matrix".into()))?;
                if v.nrows() != s || v.ncols() == 0 {
                    return Err(Error::Structure(format!("policy matrix must be {s}×Q, got {}×{}", v.nrows(), v.ncols())));
                }
                if v.column(0).iter().any(|&c| c != 1.0) {
                    return Err(Error::Structure("policy matrix must have an intercept column of ones".into()));
                }
                (v.ncols(), Some(v))
            }
            _ => (0, None),
        };
        Ok(Self { variant, p, q, s, q_policy, cross_margin: cross, policy })
    }

    /// Index map of the flat parameter vector.
    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Dimension of one state's stacked deviation vector (2q).
    pub fn dim_re(&self) -> usize {
        2 * self.q
    }
}

/// Index ranges of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Covariate count.
    pub p: usize,
    /// State-varying prefix length.
    pub q: usize,
    /// State count.
    pub s: usize,
    /// Policy length.
    pub q_policy: usize,
    /// Cross-margin correlation flag.
    pub cross: bool,
    /// α entries.
    pub alpha: Range<usize>,
    /// β entries.
    pub beta: Range<usize>,
    /// log κ entry.
    pub log_kappa: usize,
    /// log τ entries (extensive then intensive).
    pub log_tau: Range<usize>,
    /// Correlation free entries.
    pub corr: Range<usize>,
    /// Non-centered auxiliaries, state-major.
    pub z: Range<usize>,
    /// vec Γ₁ then vec Γ₂, column-major q×Q each.
    pub gamma: Range<usize>,
    /// Total length.
    pub dim: usize,
}

impl Layout {
    fn new(ms: &ModelStructure) -> Self {
        let (p, q, s) = (ms.p, ms.q, ms.s);
        let n_corr = if ms.cross_margin { lkj::n_free(2 * q) } else { 2 * lkj::n_free(q) };
        let alpha = 0..p;
        let beta = p..2 * p;
        let log_kappa = 2 * p;
        let log_tau = 2 * p + 1..2 * p + 1 + 2 * q;
        let corr = log_tau.end..log_tau.end + n_corr;
        let z = corr.end..corr.end + if q > 0 { s * 2 * q } else { 0 };
        let gamma = z.end..z.end + 2 * q * ms.q_policy;
        let dim = gamma.end;
        Self { p, q, s, q_policy: ms.q_policy, cross: ms.cross_margin, alpha, beta, log_kappa, log_tau, corr, z, gamma, dim }
    }

    /// Length of the fixed-effect block (α, β, log κ).
    pub fn fixed_dim(&self) -> usize {
        2 * self.p + 1
    }

    /// Range of hyperparameters (log τ and correlation entries).
    pub fn hyper(&self) -> Range<usize> {
        self.log_tau.start..self.corr.end
    }

    /// Index of Γ_k[r, c] for margin k ∈ {0, 1}.
    pub fn gamma_index(&self, k: usize, r: usize, c: usize) -> usize {
        self.gamma.start + k * self.q * self.q_policy + c * self.q + r
    }

    /// Parameter names in flat order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim);
        out.extend((0..self.p).map(|k| format!("alpha[{k}]")));
        out.extend((0..self.p).map(|k| format!("beta[{k}]")));
        out.push("log_kappa".into());
        out.extend((0..self.q).map(|r| format!("log_tau_ext[{r}]")));
        out.extend((0..self.q).map(|r| format!("log_tau_int[{r}]")));
        if self.cross {
            for i in 0..2 * self.q {
                for c in 0..i {
                    out.push(format!("corr[{i},{c}]"));
                }
            }
        } else {
            for m in ["ext", "int"] {
                for i in 0..self.q {
                    for c in 0..i {
                        out.push(format!("corr_{m}[{i},{c}]"));
                    }
                }
            }
        }
        if self.q > 0 {
            for s in 0..self.s {
                for c in 0..2 * self.q {
                    out.push(format!("z[{s},{c}]"));
                }
            }
        }
        for m in ["ext", "int"] {
            for c in 0..self.q_policy {
                for r in 0..self.q {
                    out.push(format!("gamma_{m}[{r},{c}]"));
                }
            }
        }
        out
    }
}

/// Structured parameter state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    /// Extensive-margin coefficients, length P.
    pub alpha: Vec<f64>,
    /// Intensive-margin coefficients, length P.
    pub beta: Vec<f64>,
    /// Log concentration.
    pub log_kappa: f64,
    /// Non-centered auxiliaries, S vectors of length 2q.
    pub z_aux: Vec<Vec<f64>>,
    /// Deviation scales, length 2q, positive.
    pub tau: Vec<f64>,
    /// Cholesky factor of the deviation correlation, 2q×2q.
    pub corr_chol: DMatrix<f64>,
    /// Policy coefficients Γ₁, Γ₂ (q×Q each), M3b only.
    pub gamma: Option<[DMatrix<f64>; 2]>,
}

impl ParamVector {
    /// All coefficients zero, τ = 1, identity correlation, Γ = 0.
    pub fn zeros(ms: &ModelStructure) -> Self {
        let k = ms.dim_re();
        Self {
            alpha: vec![0.0; ms.p],
            beta: vec![0.0; ms.p],
            log_kappa: 0.0,
            z_aux: if k > 0 { vec![vec![0.0; k]; ms.s] } else { Vec::new() },
            tau: vec![1.0; k],
            corr_chol: DMatrix::identity(k, k),
            gamma: (ms.variant == Variant::M3b)
                .then(|| [DMatrix::zeros(ms.q, ms.q_policy), DMatrix::zeros(ms.q, ms.q_policy)]),
        }
    }

    /// Checks dimensions and constraints against a structure.
    pub fn validate(&self, ms: &ModelStructure) -> Result<()> {
        let k = ms.dim_re();
        if self.alpha.len() != ms.p || self.beta.len() != ms.p {
            return Err(Error::Structure(format!("alpha/beta must have length {}", ms.p)));
        }
        if self.tau.len() != k || self.corr_chol.nrows() != k || self.corr_chol.ncols() != k {
            return Err(Error::Structure(format!("tau and corr_chol must have dimension {k}")));
        }
        if k > 0 && (self.z_aux.len() != ms.s || self.z_aux.iter().any(|z| z.len() != k)) {
            return Err(Error::Structure(format!("z_aux must be {}×{k}", ms.s)));
        }
        if self.tau.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::Domain("tau entries must be positive and finite".into()));
        }
        if k > 0 {
            lkj::check_corr_chol(&self.corr_chol, 1e-8)?;
            if !ms.cross_margin {
                for i in ms.q..k {
                    for c in 0..ms.q {
                        if self.corr_chol[(i, c)] != 0.0 {
                            return Err(Error::Structure("cross-margin block must be zero for block-diagonal variants".into()));
                        }
                    }
                }
            }
        }
        match (&self.gamma, ms.variant) {
            (Some(g), Variant::M3b) => {
                if g.iter().any(|m| m.nrows() != ms.q || m.ncols() != ms.q_policy) {
                    return Err(Error::Structure(format!("Gamma must be {}×{}", ms.q, ms.q_policy)));
                }
            }
            (None, Variant::M3b) => return Err(Error::Structure("M3b requires Gamma".into())),
            (Some(_), _) => return Err(Error::Structure("Gamma is only used by M3b".into())),
            (None, _) => {}
        }
        Ok(())
    }

    /// Flattens into the documented order.
    pub fn to_flat(&self, ms: &ModelStructure) -> Result<Vec<f64>> {
        self.validate(ms)?;
        let lay = ms.layout();
        let mut out = vec![0.0; lay.dim];
        out[lay.alpha.clone()].copy_from_slice(&self.alpha);
        out[lay.beta.clone()].copy_from_slice(&self.beta);
        out[lay.log_kappa] = self.log_kappa;
        for (o, t) in out[lay.log_tau.clone()].iter_mut().zip(&self.tau) {
            *o = t.ln();
        }
        let free = corr_free_from_chol(&self.corr_chol, ms)?;
        out[lay.corr.clone()].copy_from_slice(&free);
        let k = ms.dim_re();
        for (s, z) in self.z_aux.iter().enumerate() {
            out[lay.z.start + s * k..lay.z.start + (s + 1) * k].copy_from_slice(z);
        }
        if let Some(g) = &self.gamma {
            for (m, gm) in g.iter().enumerate() {
                for c in 0..ms.q_policy {
                    for r in 0..ms.q {
                        out[lay.gamma_index(m, r, c)] = gm[(r, c)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds from a flat vector.
    pub fn from_flat(flat: &[f64], ms: &ModelStructure) -> Result<Self> {
        let lay = ms.layout();
        if flat.len() != lay.dim {
            return Err(Error::Structure(format!("flat vector has length {}, expected {}", flat.len(), lay.dim)));
        }
        let k = ms.dim_re();
        let gamma = (ms.variant == Variant::M3b).then(|| {
            let mk = |m: usize| DMatrix::from_fn(ms.q, ms.q_policy, |r, c| flat[lay.gamma_index(m, r, c)]);
            [mk(0), mk(1)]
        });
        Ok(Self {
            alpha: flat[lay.alpha.clone()].to_vec(),
            beta: flat[lay.beta.clone()].to_vec(),
            log_kappa: flat[lay.log_kappa],
            z_aux: (0..if k > 0 { ms.s } else { 0 })
                .map(|s| flat[lay.z.start + s * k..lay.z.start + (s + 1) * k].to_vec())
                .collect(),
            tau: flat[lay.log_tau.clone()].iter().map(|v| v.exp()).collect(),
            corr_chol: chol_from_corr_free(&flat[lay.corr.clone()], ms),
            gamma,
        })
    }

    /// Covariance diag(τ) L Lᵀ diag(τ) of the random part of each state deviation.
    pub fn deviation_covariance(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.tau));
        &d * &self.corr_chol * self.corr_chol.transpose() * &d
    }

    /// State deviations δ_s (length 2q each: extensive then intensive).
    pub fn state_deviations(&self, ms: &ModelStructure) -> Vec<Vec<f64>> {
        let k = ms.dim_re();
        if k == 0 {
            return vec![Vec::new(); ms.s];
        }
        (0..ms.s)
            .map(|s| {
                let mut d = vec![0.0; k];
                for (i, di) in d.iter_mut().enumerate() {
                    let lz: f64 = (0..=i).map(|c| self.corr_chol[(i, c)] * self.z_aux[s][c]).sum();
                    *di = self.tau[i] * lz;
                }
                if let (Some(g), Some(v)) = (&self.gamma, &ms.policy) {
                    for m in 0..2 {
                        for r in 0..ms.q {
                            d[m * ms.q + r] += (0..ms.q_policy).map(|c| g[m][(r, c)] * v[(s, c)]).sum::<f64>();
                        }
                    }
                }
                d
            })
            .collect()
    }
}

/// Builds the 2q×2q factor from correlation free entries.
pub fn chol_from_corr_free(free: &[f64], ms: &ModelStructure) -> DMatrix<f64> {
    let (q, k) = (ms.q, ms.dim_re());
    if ms.cross_margin {
        return lkj::chol_from_free(free, k);
    }
    let nb = lkj::n_free(q);
    let mut l = DMatrix::zeros(k, k);
    for m in 0..2 {
        let blk = lkj::chol_from_free(&free[m * nb..(m + 1) * nb], q);
        l.view_mut((m * q, m * q), (q, q)).copy_from(&blk);
    }
    l
}

fn corr_free_from_chol(l: &DMatrix<f64>, ms: &ModelStructure) -> Result<Vec<f64>> {
    let q = ms.q;
    if ms.dim_re() == 0 {
        return Ok(Vec::new());
    }
    if ms.cross_margin {
        return lkj::free_from_chol(l);
    }
    let mut out = lkj::free_from_chol(&l.view((0, 0), (q, q)).into_owned())?;
    out.extend(lkj::free_from_chol(&l.view((q, q), (q, q)).into_owned())?);
    Ok(out)
}

/// Flat parameters unpacked for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Unpacked {
    pub tau: Vec<f64>,
    pub l: DMatrix<f64>,
    /// diag(τ) L z_s, state-major.
    pub eps: Vec<f64>,
    /// Full deviations, state-major.
    pub delta: Vec<f64>,
}

impl Unpacked {
    pub fn new(flat: &[f64], ms: &ModelStructure) -> Self {
        let lay = ms.layout();
        let k = ms.dim_re();
        let tau: Vec<f64> = flat[lay.log_tau.clone()].iter().map(|v| v.exp()).collect();
        let l = chol_from_corr_free(&flat[lay.corr.clone()], ms);
        let mut eps = vec![0.0; ms.s * k];
        let mut delta = vec![0.0; ms.s * k];
        if k > 0 {
            for s in 0..ms.s {
                let z = &flat[lay.z.start + s * k..lay.z.start + (s + 1) * k];
                for i in 0..k {
                    let lz: f64 = (0..=i).map(|c| l[(i, c)] * z[c]).sum();
                    eps[s * k + i] = tau[i] * lz;
                }
                delta[s * k..(s + 1) * k].copy_from_slice(&eps[s * k..(s + 1) * k]);
                if let Some(v) = &ms.policy {
                    for m in 0..2 {
                        for r in 0..ms.q {
                            let mut acc = 0.0;
                            for c in 0..ms.q_policy {
                                acc += flat[lay.gamma_index(m, r, c)] * v[(s, c)];
                            }
                            delta[s * k + m * ms.q + r] += acc;
                        }
                    }
                }
            }
        }
        Self { tau, l, eps, delta }
    }
}

/// Linear predictors for one observation from flat parameters and deviations.
pub(crate) fn eta_flat(flat: &[f64], delta: &[f64], obs: &Observation, ms: &ModelStructure) -> (f64, f64) {
    let p = ms.p;
    let (mut e, mut i) = (0.0, 0.0);
    for k in 0..p {
        e += obs.x[k] * flat[k];
        i += obs.x[k] * flat[p + k];
    }
    let k = ms.dim_re();
    if k > 0 {
        let d = &delta[obs.state * k..(obs.state + 1) * k];
        for r in 0..ms.q {
            e += obs.x[r] * d[r];
            i += obs.x[r] * d[ms.q + r];
        }
    }
    (e, i)
}

/// Linear predictors (η_ext, η_int) for one observation.
pub fn linear_predictors(theta: &ParamVector, obs: &Observation, ms: &ModelStructure) -> Result<(f64, f64)> {
    theta.validate(ms)?;
    check_observation(obs, ms)?;
    let deltas = theta.state_deviations(ms);
    let d: &[f64] = if ms.q > 0 { &deltas[obs.state] } else { &[] };
    Ok(predictors_at(&theta.alpha, &theta.beta, d, obs, ms.q))
}

/// (η_ext, η_int) from coefficients and one state's deviation vector.
pub fn predictors_at(alpha: &[f64], beta: &[f64], delta_s: &[f64], obs: &Observation, q: usize) -> (f64, f64) {
    let mut e: f64 = alpha.iter().zip(&obs.x).map(|(a, x)| a * x).sum();
    let mut i: f64 = beta.iter().zip(&obs.x).map(|(b, x)| b * x).sum();
    for r in 0..q {
        e += obs.x[r] * delta_s[r];
        i += obs.x[r] * delta_s[q + r];
    }
    (e, i)
}

/// Extensive and intensive log-density of one observation.
pub fn obs_log_density(obs: &Observation, eta_ext: f64, eta_int: f64, log_kappa: f64) -> (f64, f64) {
    let ext = if obs.y > 0 { -softplus(-eta_ext) } else { -softplus(eta_ext) };
    if obs.y == 0 {
        return (ext, 0.0);
    }
    let (cell, _) = BetaBinParams::clamped(obs.n, expit(eta_int), log_kappa.exp());
    (ext, log_pmf_unchecked(&cell, obs.y) - log_positive_prob(&cell))
}

/// Log-likelihood split into margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    /// ext + int.
    pub total: f64,
    /// Bernoulli participation part.
    pub ext: f64,
    /// Zero-truncated count part.
    pub int: f64,
}

/// Checks one observation against a structure.
pub fn check_observation(obs: &Observation, ms: &ModelStructure) -> Result<()> {
    if obs.n == 0 {
        return Err(Error::Data("denominator n must be at least 1".into()));
    }
    if obs.y > obs.n {
        return Err(Error::Data(format!("count y = {} exceeds n = {}", obs.y, obs.n)));
    }
    if obs.x.len() != ms.p {
        return Err(Error::Structure(format!("covariate vector has length {}, expected {}", obs.x.len(), ms.p)));
    }
    if obs.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("covariates must be finite".into()));
    }
    if ms.q > 0 && obs.state >= ms.s {
        return Err(Error::Data(format!("state {} out of range (S = {})", obs.state, ms.s)));
    }
    if !(obs.w_raw > 0.0) || !obs.w_raw.is_finite() {
        return Err(Error::Data(format!("raw weight {} must be positive", obs.w_raw)));
    }
    Ok(())
}

/// Validates every observation; errors carry the 0-based row.
pub fn validate_data(data: &[Observation], ms: &ModelStructure) -> Result<()> {
    for (i, o) in data.iter().enumerate() {
        check_observation(o, ms).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("row {i}: {m}")),
            Error::Structure(m) => Error::Structure(format!("row {i}: {m}")),
            other => other,
        })?;
    }
    Ok(())
}

/// Rows with y > 0 and n < 3, where the intensive margin cannot separate μ from κ.
pub fn identification_warnings(data: &[Observation]) -> Vec<usize> {
    data.iter().enumerate().filter(|(_, o)| o.y > 0 && o.n < 3).map(|(i, _)| i).collect()
}

fn check_weights(weights: Option<&[f64]>, n: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Data(format!("{} weights for {n} observations", w.len())));
        }
        if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Data("weights must be strictly positive".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - n as f64).abs() > 1e-6 * (n as f64).max(1.0) {
            return Err(Error::Data(format!("normalized weights sum to {sum}, expected {n}")));
        }
    }
    Ok(())
}

/// Weighted log-likelihood at deviations supplied directly.
pub fn loglik_at_deviations(
    alpha: &[f64],
    beta: &[f64],
    log_kappa: f64,
    deltas: &[Vec<f64>],
    data: &[Observation],
    weights: Option<&[f64]>,
    ms: &ModelStructure,
) -> Result<LogLik> {
    check_weights(weights, data.len())?;
    let (mut ext, mut int) = (KahanSum::default(), KahanSum::default());
    for (i, obs) in data.iter().enumerate() {
        check_observation(obs, ms)?;
        let d: &[f64] = if ms.q > 0 { &deltas[obs.state] } else { &[] };
        let (ee, ei) = predictors_at(alpha, beta, d, obs, ms.q);
        let (le, li) = obs_log_density(obs, ee, ei, log_kappa);
        let w = weights.map_or(1.0, |w| w[i]);
        ext.add(w * le);
        int.add(w * li);
    }
    let (ext, int) = (ext.value(), int.value());
    Ok(LogLik { total: ext + int, ext, int })
}

/// Weighted (pseudo-)log-likelihood. `weights` must be normalized to sum to N.
///
/// ```
/// use hbb::model::*;
/// let ms = ModelStructure::new(Variant::M0, 1, 1, None).unwrap();
/// let obs = Observation { y: 0, n: 4, x: vec![1.0], state: 0, stratum: 0, psu: 0, w_raw: 1.0 };
/// let mut theta = ParamVector::zeros(&ms);
/// theta.alpha[0] = 0.4;
/// let ll = loglik(&theta, &[obs], None, &ms).unwrap();
/// let q = 1.0 / (1.0 + (-0.4f64).exp());
/// assert!((ll.total - (1.0 - q).ln()).abs() < 1e-14);
/// ```
pub fn loglik(theta: &ParamVector, data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> Result<LogLik> {
    theta.validate(ms)?;
    let deltas = theta.state_deviations(ms);
    loglik_at_deviations(&theta.alpha, &theta.beta, theta.log_kappa, &deltas, data, weights, ms)
}

/// Weighted log-likelihood from a flat vector (hot path, no validation).
pub(crate) fn loglik_flat(flat: &[f64], data: &[Observation], weights: Option<&[f64]>, ms: &ModelStructure) -> LogLik {
    let un = Unpacked::new(flat, ms);
    let lk = flat[2 * ms.p];
    let (mut ext, mut int) = (KahanSum::default(), KahanSum::default());
    for (i, obs) in data.iter().enumerate() {
        let (ee, ei) = eta_flat(flat, &un.delta, obs, ms);
        let (le, li) = obs_log_density(obs, ee, ei, lk);
        let w = weights.map_or(1.0, |w| w[i]);
        ext.add(w * le);
        int.add(w * li);
    }
    let (ext, int) = (ext.value(), int.value());
    LogLik { total: ext + int, ext, int }
}

fn normal_lpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln() - LN_SQRT_2PI
}

/// Log prior density including the log-τ and correlation-transform Jacobians.
pub fn log_prior(theta: &ParamVector, ms: &ModelStructure) -> Result<f64> {
    theta.validate(ms)?;
    Ok(log_prior_flat(&theta.to_flat(ms)?, ms))
}

/// Log prior of a flat vector.
pub fn log_prior_flat(flat: &[f64], ms: &ModelStructure) -> f64 {
    let lay = ms.layout();
    let mut out = KahanSum::default();
    for &v in &flat[lay.alpha.start..lay.beta.end] {
        out.add(normal_lpdf(v, 0.0, COEF_PRIOR_SD));
    }
    out.add(normal_lpdf(flat[lay.log_kappa], LOG_KAPPA_PRIOR_MEAN, LOG_KAPPA_PRIOR_SD));
    for &lt in &flat[lay.log_tau.clone()] {
        // Half-normal(0, 1) on τ plus log-scale Jacobian.
        let t = lt.exp();
        out.add(std::f64::consts::LN_2 + normal_lpdf(t, 0.0, 1.0) + lt);
    }
    out.add(corr_log_prior(&flat[lay.corr.clone()], ms));
    for &v in &flat[lay.z.clone()] {
        out.add(normal_lpdf(v, 0.0, 1.0));
    }
    for m in 0..2 {
        for c in 0..lay.q_policy {
            for r in 0..lay.q {
                let sd = if c == 0 { GAMMA_INTERCEPT_PRIOR_SD } else { GAMMA_PRIOR_SD };
                out.add(normal_lpdf(flat[lay.gamma_index(m, r, c)], 0.0, sd));
            }
        }
    }
    out.value()
}

fn corr_log_prior(free: &[f64], ms: &ModelStructure) -> f64 {
    let q = ms.q;
    if ms.cross_margin {
        if 2 * q < 2 {
            return 0.0;
        }
        return lkj::log_density_free(free, 2 * q, LKJ_ETA);
    }
    if q < 2 {
        return 0.0;
    }
    let nb = lkj::n_free(q);
    lkj::log_density_free(&free[..nb], q, LKJ_ETA) + lkj::log_density_free(&free[nb..], q, LKJ_ETA)
}

/// Gradient of [`log_prior_flat`], added into `out`.
pub fn log_prior_grad_flat(flat: &[f64], ms: &ModelStructure, out: &mut [f64]) {
    let lay = ms.layout();
    let cs2 = COEF_PRIOR_SD * COEF_PRIOR_SD;
    for i in lay.alpha.start..lay.beta.end {
        out[i] -= flat[i] / cs2;
    }
    out[lay.log_kappa] -= (flat[lay.log_kappa] - LOG_KAPPA_PRIOR_MEAN) / (LOG_KAPPA_PRIOR_SD * LOG_KAPPA_PRIOR_SD);
    for i in lay.log_tau.clone() {
        let t2 = (2.0 * flat[i]).exp();
        out[i] += 1.0 - t2;
    }
    let q = ms.q;
    let c = &flat[lay.corr.clone()];
    let g = &mut out[lay.corr.clone()];
    if ms.cross_margin {
        if q > 0 {
            lkj::grad_log_density_free(c, 2 * q, LKJ_ETA, g);
        }
    } else if q >= 2 {
        let nb = lkj::n_free(q);
        let (g1, g2) = g.split_at_mut(nb);
        lkj::grad_log_density_free(&c[..nb], q, LKJ_ETA, g1);
        lkj::grad_log_density_free(&c[nb..], q, LKJ_ETA, g2);
    }
    for i in lay.z.clone() {
        out[i] -= flat[i];
    }
    for m in 0..2 {
        for cc in 0..lay.q_policy {
            for r in 0..lay.q {
                let sd = if cc == 0 { GAMMA_INTERCEPT_PRIOR_SD } else { GAMMA_PRIOR_SD };
                let i = lay.gamma_index(m, r, cc);
                out[i] -= flat[i] / (sd * sd);
            }
        }
    }
}

/// Diagonal of the negative prior Hessian for every coordinate that enters
/// the prior quadratically (α, β, log κ, z, Γ); zero elsewhere.
pub(crate) fn prior_precision_diag(ms: &ModelStructure) -> Vec<f64> {
    let lay = ms.layout();
    let mut d = vec![0.0; lay.dim];
    for v in &mut d[lay.alpha.start..lay.beta.end] {
        *v = 1.0 / (COEF_PRIOR_SD * COEF_PRIOR_SD);
    }
    d[lay.log_kappa] = 1.0 / (LOG_KAPPA_PRIOR_SD * LOG_KAPPA_PRIOR_SD);
    for v in &mut d[lay.z.clone()] {
        *v = 1.0;
    }
    for m in 0..2 {
        for c in 0..lay.q_policy {
            for r in 0..lay.q {
                let sd = if c == 0 { GAMMA_INTERCEPT_PRIOR_SD } else { GAMMA_PRIOR_SD };
                d[lay.gamma_index(m, r, c)] = 1.0 / (sd * sd);
            }
        }
    }
    d
}

/// Log access and log intensity effects of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalEffect {
    /// (1−q) α̃_k.
    pub lae: f64,
    /// (1−μ) ε_h β̃_k.
    pub lie: f64,
    /// lae + lie.
    pub total: f64,
    /// |lae|/(|lae|+|lie|); 0 when both vanish.
    pub ext_share: f64,
}

impl MarginalEffect {
    /// Assembles the effect from its two components.
    pub fn from_components(lae: f64, lie: f64) -> Self {
        let den = lae.abs() + lie.abs();
        Self { lae, lie, total: lae + lie, ext_share: if den > 0.0 { lae.abs() / den } else { 0.0 } }
    }
}

/// LAE/LIE from participation probability, mean, elasticity and total coefficients.
///
/// ```
/// let me = hbb::model::lae_lie_from_parts(0.64, 0.30, 0.93, -0.324, 0.090);
/// assert!((me.lae + 0.36 * 0.324).abs() < 1e-12);
/// assert!((me.lie - 0.7 * 0.93 * 0.090).abs() < 1e-12);
/// ```
pub fn lae_lie_from_parts(q: f64, mu: f64, elasticity: f64, alpha_k: f64, beta_k: f64) -> MarginalEffect {
    MarginalEffect::from_components((1.0 - q) * alpha_k, (1.0 - mu) * elasticity * beta_k)
}

/// Total (fixed plus state) coefficients of covariate k for one state.
fn total_coefs(theta: &ParamVector, deltas: &[Vec<f64>], state: usize, k: usize, ms: &ModelStructure) -> (f64, f64) {
    let (mut a, mut b) = (theta.alpha[k], theta.beta[k]);
    if k < ms.q {
        a += deltas[state][k];
        b += deltas[state][ms.q + k];
    }
    (a, b)
}

/// Cell quantities (q, μ, κ report) for one observation.
fn cell_terms(theta: &ParamVector, deltas: &[Vec<f64>], obs: &Observation, ms: &ModelStructure) -> (f64, f64, crate::bbkernel::IntensityReport) {
    let d: &[f64] = if ms.q > 0 { &deltas[obs.state] } else { &[] };
    let (ee, ei) = predictors_at(&theta.alpha, &theta.beta, d, obs, ms.q);
    let q = expit(ee);
    let (cell, _) = BetaBinParams::clamped(obs.n, expit(ei), theta.log_kappa.exp());
    (q, cell.mu, intensity_report(&cell))
}

/// LAE/LIE of covariate k (0-based) at one observation's cell.
pub fn lae_lie(theta: &ParamVector, obs: &Observation, ms: &ModelStructure, k: usize) -> Result<MarginalEffect> {
    theta.validate(ms)?;
    check_observation(obs, ms)?;
    if k >= ms.p {
        return Err(Error::Structure(format!("covariate index {k} out of range")));
    }
    let deltas = theta.state_deviations(ms);
    let (q, mu, rep) = cell_terms(theta, &deltas, obs, ms);
    let (a, b) = total_coefs(theta, &deltas, obs.state, k, ms);
    Ok(lae_lie_from_parts(q, mu, rep.elasticity, a, b))
}

/// Posterior summary of one quantity: mean and 2.5/97.5 percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// Mean over draws.
    pub mean: f64,
    /// 2.5th percentile.
    pub lo: f64,
    /// 97.5th percentile.
    pub hi: f64,
}

impl Band {
    /// Summarizes a sample.
    pub fn from_sample(v: &[f64]) -> Self {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Self { mean, lo: quantile(v, 0.025), hi: quantile(v, 0.975) }
    }
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    if s.is_empty() {
        return f64::NAN;
    }
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Average marginal effect decomposition of one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmeRow {
    /// Covariate index.
    pub covariate: usize,
    /// h q(1−q) α̃_k averaged over observations.
    pub extensive: Band,
    /// q h ε_h (1−μ) β̃_k averaged over observations.
    pub intensive: Band,
    /// extensive + intensive.
    pub total: Band,
    /// |ext|/(|ext|+|int|).
    pub ext_share: Band,
}

/// Per-draw average marginal effects for every non-intercept covariate.
pub fn ame_per_draw(theta: &ParamVector, data: &[Observation], ms: &ModelStructure) -> Result<Vec<(f64, f64)>> {
    theta.validate(ms)?;
    let deltas = theta.state_deviations(ms);
    let mut acc = vec![(0.0, 0.0); ms.p];
    for obs in data {
        let (q, mu, rep) = cell_terms(theta, &deltas, obs, ms);
        for (k, slot) in acc.iter_mut().enumerate().skip(1) {
            let (a, b) = total_coefs(theta, &deltas, obs.state, k, ms);
            slot.0 += rep.h * q * (1.0 - q) * a;
            slot.1 += q * rep.h * rep.elasticity * (1.0 - mu) * b;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(acc.into_iter().map(|(e, i)| (e / n, i / n)).collect())
}

/// AME table with percentile bands over draws.
pub fn ame_decompose(draws: &[ParamVector], data: &[Observation], ms: &ModelStructure) -> Result<Vec<AmeRow>> {
    if draws.is_empty() {
        return Err(Error::Data("at least one draw is required".into()));
    }
    let per: Vec<Vec<(f64, f64)>> = draws.iter().map(|d| ame_per_draw(d, data, ms)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for k in 1..ms.p {
        let e: Vec<f64> = per.iter().map(|r| r[k].0).collect();
        let i: Vec<f64> = per.iter().map(|r| r[k].1).collect();
        let t: Vec<f64> = e.iter().zip(&i).map(|(a, b)| a + b).collect();
        let sh: Vec<f64> = e
            .iter()
            .zip(&i)
            .map(|(a, b)| if a.abs() + b.abs() > 0.0 { a.abs() / (a.abs() + b.abs()) } else { 0.0 })
            .collect();
        out.push(AmeRow {
            covariate: k,
            extensive: Band::from_sample(&e),
            intensive: Band::from_sample(&i),
            total: Band::from_sample(&t),
            ext_share: Band::from_sample(&sh),
        });
    }
    Ok(out)
}

/// National, policy-explained and residual parts of one state coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    /// Fixed coefficient.
    pub national: f64,
    /// γ_kᵀ v_s.
    pub policy_explained: f64,
    /// ε_{k,s}.
    pub residual: f64,
}

impl Expansion {
    /// national + policy_explained + residual.
    pub fn total(&self) -> f64 {
        self.national + self.policy_explained + self.residual
    }
}

/// Expansion of covariate k's state-s coefficient on both margins (M3b only).
pub fn poverty_expansion(theta: &ParamVector, ms: &ModelStructure, s: usize, k: usize) -> Result<[Expansion; 2]> {
    if ms.variant != Variant::M3b {
        return Err(Error::Structure("poverty expansion requires M3b".into()));
    }
    theta.validate(ms)?;
    if s >= ms.s || k >= ms.q {
        return Err(Error::Structure(format!("state {s} or covariate {k} out of range")));
    }
    let g = theta.gamma.as_ref().expect("validated");
    let v = ms.policy.as_ref().expect("validated");
    let mut out = [Expansion { national: 0.0, policy_explained: 0.0, residual: 0.0 }; 2];
    for (m, slot) in out.iter_mut().enumerate() {
        let i = m * ms.q + k;
        let lz: f64 = (0..=i).map(|c| theta.corr_chol[(i, c)] * theta.z_aux[s][c]).sum();
        slot.national = if m == 0 { theta.alpha[k] } else { theta.beta[k] };
        slot.policy_explained = (0..ms.q_policy).map(|c| g[m][(k, c)] * v[(s, c)]).sum();
        slot.residual = theta.tau[i] * lz;
    }
    Ok(out)
}

/// Scope of a reversal probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReversalScope {
    /// Fixed coefficients α_k, β_k.
    Population,
    /// State totals α_k + δ_{1,s,k}, β_k + δ_{2,s,k}.
    State(usize),
}

/// Share of draws with α̃_k < 0 and β̃_k > 0.
pub fn reversal_probability(draws: &[ParamVector], ms: &ModelStructure, scope: ReversalScope, k: usize) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Data("at least one draw is required".into()));
    }
    let mut hits = 0usize;
    for d in draws {
        let (a, b) = match scope {
            ReversalScope::Population => (d.alpha[k], d.beta[k]),
            ReversalScope::State(s) => {
                let deltas = d.state_deviations(ms);
                total_coefs(d, &deltas, s, k, ms)
            }
        };
        if a < 0.0 && b > 0.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / draws.len() as f64)
}
