//! Survey-design machinery.
//!
//! Weights are normalized to sum to the sample size. The meat of the
//! sandwich aggregates weighted scores to PSU totals and centres them within
//! strata. The bread is the observed information of the weighted
//! pseudo-likelihood, never the optimizer's mode Hessian.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Observation;
use crate::scores::{ObservedInformation, ScoreMatrix};
use crate::special::{expit, norm_cdf};

/// Rescales raw weights so they sum to their count.
///
/// ```
/// let w = hbb::survey::normalize_weights(&[1.0, 3.0]).unwrap();
/// assert_eq!(w, vec![0.5, 1.5]);
/// ```
pub fn normalize_weights(w_raw: &[f64]) -> Result<Vec<f64>> {
    if let Some((i, v)) = w_raw.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!("weight {v} at row {i} must be positive and finite")));
    }
    let n = w_raw.len() as f64;
    let s: f64 = w_raw.iter().sum();
    Ok(w_raw.iter().map(|w| w * n / s).collect())
}

/// Kish design effect 1 + CV²(w) (population CV) and effective sample size N/DEFF.
pub fn kish(w: &[f64]) -> Result<(f64, f64)> {
    if w.len() < 2 {
        return Err(Error::Data("Kish statistics need at least two weights".into()));
    }
    let n = w.len() as f64;
    let m = w.iter().sum::<f64>() / n;
    let v = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let deff = 1.0 + v / (m * m);
    Ok((deff, n / deff))
}

/// Large-sample weight diagnostic δ = log(w_max/w_min)/log N, flagged when δ > 0.5.
pub fn bvm_weight_diagnostic(w: &[f64], n: usize) -> Result<(f64, bool)> {
    if w.is_empty() || w.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Data("weights must be positive".into()));
    }
    let (lo, hi) = w.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let delta = bvm_delta_from_ratio(hi / lo, n);
    Ok((delta, delta > 0.5))
}

/// δ from a max/min weight ratio.
pub fn bvm_delta_from_ratio(ratio: f64, n: usize) -> f64 {
    ratio.ln() / (n as f64).ln()
}

/// Summary of a weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    /// Count.
    pub n: usize,
    /// Minimum.
    pub min: f64,
    /// Maximum.
    pub max: f64,
    /// max/min.
    pub ratio: f64,
    /// Mean.
    pub mean: f64,
    /// Population coefficient of variation.
    pub cv: f64,
    /// 5th, 25th, 50th, 75th, 95th percentiles.
    pub quantiles: [f64; 5],
    /// Kish design effect.
    pub deff: f64,
    /// Kish effective sample size.
    pub ess: f64,
}

/// Weight distribution statistics.
pub fn weight_summary(w: &[f64]) -> Result<WeightSummary> {
    let (deff, ess) = kish(w)?;
    let n = w.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let (min, max) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let q = |p| crate::model::quantile(w, p);
    Ok(WeightSummary {
        n,
        min,
        max,
        ratio: max / min,
        mean,
        cv: (deff - 1.0).sqrt(),
        quantiles: [q(0.05), q(0.25), q(0.5), q(0.75), q(0.95)],
        deff,
        ess,
    })
}

/// What to do with strata holding a single PSU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SingletonPolicy {
    /// Refuse with a design error naming the stratum.
    #[default]
    Error,
    /// Merge each singleton stratum into the next stratum in sorted order (the previous one for the last).
    Collapse,
}

/// Strata, PSUs and weights of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDesign {
    /// Stratum id per observation.
    pub strata: Vec<usize>,
    /// PSU id per observation (unique within stratum).
    pub psus: Vec<usize>,
    /// Raw weights.
    pub weights_raw: Vec<f64>,
    /// Weights normalized to sum to N.
    pub weights_norm: Vec<f64>,
}

impl SurveyDesign {
    /// Builds the design from observation records.
    pub fn from_observations(data: &[Observation]) -> Result<Self> {
        let raw: Vec<f64> = data.iter().map(|o| o.w_raw).collect();
        Ok(Self {
            strata: data.iter().map(|o| o.stratum).collect(),
            psus: data.iter().map(|o| o.psu).collect(),
            weights_norm: normalize_weights(&raw)?,
            weights_raw: raw,
        })
    }

    /// Observation count.
    pub fn len(&self) -> usize {
        self.strata.len()
    }

    /// True when there are no observations.
    pub fn is_empty(&self) -> bool {
        self.strata.is_empty()
    }

    /// PSU count per stratum.
    pub fn psu_counts(&self) -> BTreeMap<usize, usize> {
        let mut sets: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
        for (h, c) in self.strata.iter().zip(&self.psus) {
            sets.entry(*h).or_default().insert(*c);
        }
        sets.into_iter().map(|(h, s)| (h, s.len())).collect()
    }

    /// Σ_h (C_h − 1).
    pub fn dof(&self) -> usize {
        self.psu_counts().values().map(|c| c.saturating_sub(1)).sum()
    }

    /// Stratum map after applying a singleton policy.
    fn effective_strata(&self, policy: SingletonPolicy) -> Result<Vec<usize>> {
        let counts = self.psu_counts();
        let singles: Vec<usize> = counts.iter().filter(|(_, &c)| c < 2).map(|(&h, _)| h).collect();
        if singles.is_empty() {
            return Ok(self.strata.clone());
        }
        match policy {
            SingletonPolicy::Error => Err(Error::Design(format!("stratum {} has a single PSU", singles[0]))),
            SingletonPolicy::Collapse => {
                let ids: Vec<usize> = counts.keys().copied().collect();
                if ids.len() < 2 {
                    return Err(Error::Design("cannot collapse: only one stratum".into()));
                }
                let mut map: BTreeMap<usize, usize> = ids.iter().map(|&h| (h, h)).collect();
                for &h in &singles {
                    let pos = ids.iter().position(|&x| x == h).expect("present");
                    let target = if pos + 1 < ids.len() { ids[pos + 1] } else { ids[pos - 1] };
                    map.insert(h, target);
                }
                // Resolve chains of merges.
                let resolve = |mut h: usize| {
                    for _ in 0..ids.len() {
                        let t = map[&h];
                        if t == h {
                            break;
                        }
                        h = t;
                    }
                    h
                };
                Ok(self.strata.iter().map(|&h| resolve(h)).collect())
            }
        }
    }
}

/// Stratified PSU meat J = Σ_h C_h/(C_h−1) Σ_c (s̄_hc − s̄_h)(s̄_hc − s̄_h)ᵀ with s̄_hc = Σ w̃_i s_i.
pub fn meat_cluster(scores: &ScoreMatrix, design: &SurveyDesign, policy: SingletonPolicy) -> Result<DMatrix<f64>> {
    meat_cluster_rows(&scores.rows, &design.weights_norm, design, policy)
}

/// [`meat_cluster`] on raw score rows with explicit observation weights.
pub fn meat_cluster_rows(rows: &[Vec<f64>], weights: &[f64], design: &SurveyDesign, policy: SingletonPolicy) -> Result<DMatrix<f64>> {
    if rows.len() != design.len() || weights.len() != design.len() {
        return Err(Error::Structure(format!(
            "{} score rows and {} weights for a design of {} observations",
            rows.len(),
            weights.len(),
            design.len()
        )));
    }
    let d = rows.first().map_or(0, |r| r.len());
    let strata = design.effective_strata(policy)?;
    let mut totals: BTreeMap<usize, BTreeMap<(usize, usize), DVector<f64>>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let e = totals
            .entry(strata[i])
            .or_default()
            .entry((design.strata[i], design.psus[i]))
            .or_insert_with(|| DVector::zeros(d));
        for (k, v) in row.iter().enumerate() {
            e[k] += weights[i] * v;
        }
    }
    let mut j = DMatrix::zeros(d, d);
    for psus in totals.values() {
        let c = psus.len() as f64;
        if psus.len() < 2 {
            return Err(Error::Design("stratum with a single PSU after collapsing".into()));
        }
        let mean = psus.values().fold(DVector::zeros(d), |a, v| a + v) / c;
        let mut acc = DMatrix::zeros(d, d);
        for v in psus.values() {
            let r = v - &mean;
            acc += &r * r.transpose();
        }
        j += acc * (c / (c - 1.0));
    }
    Ok((&j + j.transpose()) * 0.5)
}

fn condition_report(h: &DMatrix<f64>) -> Error {
    let ev = h.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v.abs()), b.max(v.abs())));
    Error::Numeric(format!("bread matrix is singular or indefinite (condition number {:.3e})", hi / lo))
}

/// V = H⁻¹ J H⁻¹ by Cholesky solves, symmetrized.
pub fn sandwich(h: &DMatrix<f64>, j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if h.shape() != j.shape() || h.nrows() != h.ncols() {
        return Err(Error::Structure("bread and meat must be square and of equal size".into()));
    }
    let ch = h.clone().cholesky().ok_or_else(|| condition_report(h))?;
    let a = ch.solve(j);
    let v = ch.solve(&a.transpose());
    Ok((&v + v.transpose()) * 0.5)
}

/// DER band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerClass {
    /// DER ≤ 1.2.
    Insensitive,
    /// 1.2 < DER ≤ 1.5.
    Moderate,
    /// DER > 1.5.
    Sensitive,
}

impl DerClass {
    /// Classifies one DER value.
    pub fn of(der: f64) -> Self {
        if der > 1.5 {
            DerClass::Sensitive
        } else if der > 1.2 {
            DerClass::Moderate
        } else {
            DerClass::Insensitive
        }
    }

    /// Lowercase label.
    pub fn label(&self) -> &'static str {
        match self {
            DerClass::Insensitive => "insensitive",
            DerClass::Moderate => "moderate",
            DerClass::Sensitive => "sensitive",
        }
    }
}

/// der_p = V_pp / (H⁻¹)_pp with band labels.
pub fn der(v_sand: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<DerClass>)> {
    if v_sand.shape() != h.shape() {
        return Err(Error::Structure("V and H must have equal size".into()));
    }
    let hinv = h.clone().cholesky().ok_or_else(|| condition_report(h))?.inverse();
    let d: Vec<f64> = (0..h.nrows()).map(|p| v_sand[(p, p)] / hinv[(p, p)]).collect();
    let c = d.iter().map(|&v| DerClass::of(v)).collect();
    Ok((d, c))
}

/// Exact normal–normal DER (1 + λ·DEFF)/(1 + λ)².
pub fn der_exact(lambda: f64, deff: f64) -> f64 {
    (1.0 + lambda * deff) / ((1.0 + lambda) * (1.0 + lambda))
}

/// Linear-interpolation DER 1 + λ(DEFF − 1), an upper bound on [`der_exact`].
pub fn der_heuristic(lambda: f64, deff: f64) -> f64 {
    1.0 + lambda * (deff - 1.0)
}

/// Bread, meat, sandwich and DER for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichResult {
    /// Parameter names.
    pub names: Vec<String>,
    /// Bread (observed information of the weighted pseudo-likelihood).
    pub h_obs: DMatrix<f64>,
    /// Stratified cluster meat.
    pub j_cluster: DMatrix<f64>,
    /// H⁻¹ J H⁻¹.
    pub v_sand: DMatrix<f64>,
    /// V_pp/(H⁻¹)_pp.
    pub der: Vec<f64>,
    /// Band per parameter.
    pub classification: Vec<DerClass>,
    /// Σ_h (C_h − 1).
    pub dof: usize,
}

impl SandwichResult {
    /// Builds the result on the first `block` coordinates of the score index
    /// (all of them when `block` is `None`).
    pub fn compute(
        h_obs: &ObservedInformation,
        scores: &ScoreMatrix,
        design: &SurveyDesign,
        block: Option<usize>,
        policy: SingletonPolicy,
    ) -> Result<Self> {
        if h_obs.index != scores.index {
            return Err(Error::Structure("score and information coordinates differ".into()));
        }
        let d = block.unwrap_or(h_obs.index.dim()).min(h_obs.index.dim());
        let rows: Vec<Vec<f64>> = scores.rows.iter().map(|r| r[..d].to_vec()).collect();
        let j = meat_cluster_rows(&rows, &design.weights_norm, design, policy)?;
        let h = h_obs.matrix.view((0, 0), (d, d)).into_owned();
        let v = sandwich(&h, &j)?;
        let (der, classification) = der(&v, &h)?;
        Ok(Self {
            names: h_obs.index.names[..d].to_vec(),
            h_obs: h,
            j_cluster: j,
            v_sand: v,
            der,
            classification,
            dof: design.dof(),
        })
    }

    /// Fixed-effect sandwich with the state deviations profiled out.
    ///
    /// `h_obs` and `scores` must include the deviation columns. The deviation
    /// block of the bread receives the random-effect precision Σ_δ⁻¹ for each
    /// state; the result is the fixed block of H⁻¹JH⁻¹. The stored bread is
    /// the Schur complement, and the stored meat uses scores projected off the
    /// deviation directions, so V = H⁻¹JH⁻¹ holds for the stored fields.
    pub fn compute_profiled(
        h_obs: &ObservedInformation,
        scores: &ScoreMatrix,
        design: &SurveyDesign,
        re_covariance: &DMatrix<f64>,
        policy: SingletonPolicy,
    ) -> Result<Self> {
        if h_obs.index != scores.index {
            return Err(Error::Structure("score and information coordinates differ".into()));
        }
        let idx = &h_obs.index;
        let f = idx.fixed_dim();
        let k = 2 * idx.q;
        if idx.s == 0 || k == 0 {
            return Self::compute(h_obs, scores, design, Some(f), policy);
        }
        if re_covariance.shape() != (k, k) {
            return Err(Error::Structure(format!("random-effect covariance must be {k}×{k}")));
        }
        let prec = re_covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("random-effect covariance is not positive definite".into()))?
            .inverse();
        let mut h = h_obs.matrix.clone();
        for s in 0..idx.s {
            let o = f + s * k;
            let mut blk = h.view_mut((o, o), (k, k));
            blk += &prec;
        }
        let j = meat_cluster_rows(&scores.rows, &design.weights_norm, design, policy)?;
        let hinv = h.clone().cholesky().ok_or_else(|| condition_report(&h))?.inverse();
        let v_full = &hinv * &j * &hinv;
        let v = v_full.view((0, 0), (f, f)).into_owned();
        let v = (&v + v.transpose()) * 0.5;
        let model = hinv.view((0, 0), (f, f)).into_owned();
        let schur = model.clone().cholesky().ok_or_else(|| condition_report(&model))?.inverse();
        let schur = (&schur + schur.transpose()) * 0.5;
        let j_u = &schur * &v * &schur;
        let der: Vec<f64> = (0..f).map(|p| v[(p, p)] / model[(p, p)]).collect();
        Ok(Self {
            names: idx.names[..f].to_vec(),
            h_obs: schur,
            j_cluster: (&j_u + j_u.transpose()) * 0.5,
            v_sand: v,
            classification: der.iter().map(|&x| DerClass::of(x)).collect(),
            der,
            dof: design.dof(),
        })
    }

    /// Wald intervals θ̂_p ± z_{1−(1−level)/2} √V_pp.
    pub fn wald(&self, estimate: &[f64], level: f64) -> Vec<(f64, f64)> {
        wald_intervals(estimate, &self.v_sand, level)
    }
}

/// Normal-reference intervals from a covariance matrix.
pub fn wald_intervals(estimate: &[f64], cov: &DMatrix<f64>, level: f64) -> Vec<(f64, f64)> {
    let z = crate::special::norm_quantile(0.5 + level / 2.0);
    estimate
        .iter()
        .enumerate()
        .map(|(p, &e)| {
            let s = cov[(p, p)].max(0.0).sqrt();
            (e - z * s, e + z * s)
        })
        .collect()
}

/// Square-root factor used to map draws onto the target covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CalibrationTransform {
    /// A = L_V L_draws⁻¹ with lower Cholesky factors.
    #[default]
    Cholesky,
    /// A = V^{1/2} Σ_draws^{-1/2} with symmetric roots.
    SymmetricRoot,
}

fn sym_root(m: &DMatrix<f64>, inverse: bool) -> Result<DMatrix<f64>> {
    let e = m.clone().symmetric_eigen();
    if e.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("matrix is not positive definite".into()));
    }
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| if inverse { 1.0 / v.sqrt() } else { v.sqrt() }));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// Affine map of draws so that the block has mean θ̂ and covariance V exactly.
///
/// θ*_b = θ̂_b + A(θ_b − θ̄_b) where θ̄ is the draw mean, Σ the draw covariance
/// (divisor M) and AΣAᵀ = V. Coordinates outside `block` are unchanged.
pub fn cholesky_calibrate(
    draws: &[Vec<f64>],
    theta_hat: &[f64],
    v_sand: &DMatrix<f64>,
    block: &[usize],
    transform: CalibrationTransform,
) -> Result<Vec<Vec<f64>>> {
    let k = block.len();
    let m = draws.len();
    if v_sand.nrows() != k || v_sand.ncols() != k {
        return Err(Error::Structure(format!("V must be {k}×{k}")));
    }
    if m <= k {
        return Err(Error::Numeric(format!("{m} draws cannot support a {k}-dimensional covariance")));
    }
    let mf = m as f64;
    let mean = DVector::from_iterator(k, block.iter().map(|&j| draws.iter().map(|d| d[j]).sum::<f64>() / mf));
    let mut cov = DMatrix::zeros(k, k);
    for d in draws {
        let r = DVector::from_iterator(k, block.iter().enumerate().map(|(a, &j)| d[j] - mean[a]));
        cov += &r * r.transpose();
    }
    cov /= mf;
    let a = match transform {
        CalibrationTransform::Cholesky => {
            let lm = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("draw covariance is not positive definite".into()))?
                .l();
            let lv = v_sand
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numeric("target covariance is not positive definite".into()))?
                .l();
            let lm_inv = lm
                .solve_lower_triangular(&DMatrix::identity(k, k))
                .ok_or_else(|| Error::Numeric("triangular solve failed".into()))?;
            lv * lm_inv
        }
        CalibrationTransform::SymmetricRoot => sym_root(v_sand, false)? * sym_root(&cov, true)?,
    };
    Ok(draws
        .iter()
        .map(|d| {
            let mut out = d.clone();
            let r = DVector::from_iterator(k, block.iter().enumerate().map(|(b, &j)| d[j] - mean[b]));
            let t = &a * r;
            for (b, &j) in block.iter().enumerate() {
                out[j] = theta_hat[j] + t[b];
            }
            out
        })
        .collect())
}

/// Margin selector for design tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Margin {
    /// Participation z = 1(y > 0), logistic link.
    Ext,
    /// Share y/n among y > 0, identity link.
    Int,
}

/// Result of a log-weight regression test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfeffermannResult {
    /// Coefficient on log w.
    pub gamma_hat: f64,
    /// Its standard error.
    pub se: f64,
    /// Two-sided normal p-value.
    pub p_value: f64,
    /// Logistic fit hit separation and used a ridge.
    pub separation: bool,
}

/// GLM coefficient estimates with model-based covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    /// Coefficients.
    pub coef: Vec<f64>,
    /// Model-based covariance (inverse Fisher information, or σ²(XᵀWX)⁻¹).
    pub cov: DMatrix<f64>,
    /// Per-row score contributions (unweighted).
    pub score_rows: Vec<Vec<f64>>,
    /// Bread Σ w_i x_i x_iᵀ v_i used for the sandwich.
    pub bread: DMatrix<f64>,
    /// Ridge added for separation.
    pub separation: bool,
}

/// Weighted logistic regression by iteratively reweighted least squares.
pub fn logistic_irls(x: &[Vec<f64>], z: &[f64], w: &[f64], ridge: f64) -> Result<GlmFit> {
    let p = x.first().map_or(0, |r| r.len());
    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut bread = DMatrix::zeros(p, p);
    for _ in 0..100 {
        let mut info = DMatrix::identity(p, p) * ridge;
        let mut grad = -&beta * ridge;
        for (i, row) in x.iter().enumerate() {
            let xi = DVector::from_column_slice(row);
            let mu = expit(xi.dot(&beta));
            grad += &xi * (w[i] * (z[i] - mu));
            info += &xi * xi.transpose() * (w[i] * mu * (1.0 - mu));
        }
        let step = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("logistic information is singular".into()))?
            .solve(&grad);
        beta += &step;
        bread = info;
        if step.amax() < 1e-10 {
            converged = true;
            break;
        }
        if beta.amax() > 50.0 {
            break;
        }
    }
    if !converged || beta.amax() > 30.0 {
        if ridge == 0.0 {
            let mut f = logistic_irls(x, z, w, 1e-6)?;
            f.separation = true;
            return Ok(f);
        }
        if !converged {
            return Err(Error::Numeric("logistic regression did not converge".into()));
        }
    }
    let cov = bread.clone().cholesky().ok_or_else(|| Error::Numeric("singular information".into()))?.inverse();
    let score_rows = x
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mu = expit(row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum());
            row.iter().map(|v| v * (z[i] - mu)).collect()
        })
        .collect();
    Ok(GlmFit { coef: beta.iter().copied().collect(), cov, score_rows, bread, separation: false })
}

/// Weighted least squares with classical covariance σ̂²(XᵀWX)⁻¹.
pub fn least_squares(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Result<GlmFit> {
    let p = x.first().map_or(0, |r| r.len());
    let n = x.len();
    if n <= p {
        return Err(Error::Data("too few rows for least squares".into()));
    }
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for (i, row) in x.iter().enumerate() {
        let xi = DVector::from_column_slice(row);
        xtx += &xi * xi.transpose() * w[i];
        xty += &xi * (w[i] * y[i]);
    }
    let ch = xtx.clone().cholesky().ok_or_else(|| Error::Numeric("design matrix is rank deficient".into()))?;
    let beta = ch.solve(&xty);
    let resid: Vec<f64> = x.iter().zip(y).map(|(r, yi)| yi - r.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>()).collect();
    let sw: f64 = w.iter().sum();
    let s2 = resid.iter().zip(w).map(|(r, wi)| wi * r * r).sum::<f64>() / sw * (n as f64 / (n - p) as f64);
    let cov = ch.inverse() * s2 * (sw / n as f64);
    let score_rows = x.iter().zip(&resid).map(|(r, e)| r.iter().map(|v| v * e).collect()).collect();
    Ok(GlmFit { coef: beta.iter().copied().collect(), cov, score_rows, bread: xtx, separation: false })
}

fn margin_rows(data: &[Observation], margin: Margin, cols: &[usize]) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>) {
    let keep: Vec<usize> = (0..data.len()).filter(|&i| margin == Margin::Ext || data[i].y > 0).collect();
    let x = keep.iter().map(|&i| cols.iter().map(|&c| data[i].x[c]).collect()).collect();
    let y = keep
        .iter()
        .map(|&i| match margin {
            Margin::Ext => f64::from(u8::from(data[i].y > 0)),
            Margin::Int => f64::from(data[i].y) / f64::from(data[i].n),
        })
        .collect();
    (keep, x, y)
}

/// Regression of the margin outcome on [x_cols, log w]; tests the log w coefficient.
///
/// `cols` selects covariate columns (column 0 is the intercept and is always
/// included). The standard error is the stratified PSU linearization of the
/// unweighted fit; singleton strata are collapsed.
pub fn pfeffermann_test(data: &[Observation], margin: Margin, cols: &[usize]) -> Result<PfeffermannResult> {
    let mut cols: Vec<usize> = cols.to_vec();
    if !cols.contains(&0) {
        cols.insert(0, 0);
    }
    let (keep, mut x, y) = margin_rows(data, margin, &cols);
    let lw: Vec<f64> = keep.iter().map(|&i| data[i].w_raw.ln()).collect();
    let m = lw.iter().sum::<f64>() / lw.len().max(1) as f64;
    let spread = lw.iter().map(|v| (v - m).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * (1.0 + m.abs()) {
        return Err(Error::Design("log weight is constant and collinear with the intercept".into()));
    }
    for (row, l) in x.iter_mut().zip(&lw) {
        row.push(*l);
    }
    let ones = vec![1.0; y.len()];
    let fit = match margin {
        Margin::Ext => logistic_irls(&x, &y, &ones, 0.0)?,
        Margin::Int => least_squares(&x, &y, &ones)?,
    };
    let sub: Vec<Observation> = keep.iter().map(|&i| data[i].clone()).collect();
    let design = SurveyDesign::from_observations(&sub)?;
    let j = meat_cluster_rows(&fit.score_rows, &ones, &design, SingletonPolicy::Collapse)?;
    let v = sandwich(&fit.bread, &j)?;
    let k = fit.coef.len() - 1;
    let se = v[(k, k)].sqrt();
    let zstat = fit.coef[k] / se;
    Ok(PfeffermannResult { gamma_hat: fit.coef[k], se, p_value: 2.0 * (1.0 - norm_cdf(zstat.abs())), separation: fit.separation })
}

/// One Hausman comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HausmanRow {
    /// Unweighted estimate.
    pub beta_uw: f64,
    /// Weighted estimate.
    pub beta_wt: f64,
    /// Z statistic; `None` when var_wt ≤ var_uw.
    pub z: Option<f64>,
    /// Two-sided p-value; `None` with `z`.
    pub p_value: Option<f64>,
    /// Set when the variance difference is not positive.
    pub flagged: bool,
}

/// Z_k = (β̂_wt − β̂_uw)/√(var_wt − var_uw), per parameter. Identical
/// estimates give Z = 0 whatever the variance difference; otherwise a
/// non-positive difference is flagged and Z is withheld.
///
/// ```
/// let r = hbb::survey::hausman(&[0.0], &[0.0], &[1.0], &[2.0]).unwrap();
/// assert_eq!(r[0].z, Some(0.0));
/// ```
pub fn hausman(beta_uw: &[f64], beta_wt: &[f64], var_uw: &[f64], var_wt: &[f64]) -> Result<Vec<HausmanRow>> {
    let k = beta_uw.len();
    if beta_wt.len() != k || var_uw.len() != k || var_wt.len() != k {
        return Err(Error::Structure("Hausman inputs must have equal length".into()));
    }
    Ok((0..k)
        .map(|i| {
            let dv = var_wt[i] - var_uw[i];
            if beta_wt[i] == beta_uw[i] {
                HausmanRow { beta_uw: beta_uw[i], beta_wt: beta_wt[i], z: Some(0.0), p_value: Some(1.0), flagged: dv <= 0.0 }
            } else if dv > 0.0 {
                let z = (beta_wt[i] - beta_uw[i]) / dv.sqrt();
                HausmanRow {
                    beta_uw: beta_uw[i],
                    beta_wt: beta_wt[i],
                    z: Some(z),
                    p_value: Some(2.0 * (1.0 - norm_cdf(z.abs()))),
                    flagged: false,
                }
            } else {
                HausmanRow { beta_uw: beta_uw[i], beta_wt: beta_wt[i], z: None, p_value: None, flagged: true }
            }
        })
        .collect())
}

/// Hausman table for one margin: unweighted GLM with model-based variance
/// against weighted GLM with stratified cluster-robust variance.
pub fn hausman_margin(data: &[Observation], margin: Margin, cols: &[usize], policy: SingletonPolicy) -> Result<Vec<HausmanRow>> {
    let (keep, x, y) = margin_rows(data, margin, cols);
    let sub: Vec<Observation> = keep.iter().map(|&i| data[i].clone()).collect();
    let design = SurveyDesign::from_observations(&sub)?;
    let ones = vec![1.0; y.len()];
    let (uw, wt) = match margin {
        Margin::Ext => (logistic_irls(&x, &y, &ones, 0.0)?, logistic_irls(&x, &y, &design.weights_norm, 0.0)?),
        Margin::Int => (least_squares(&x, &y, &ones)?, least_squares(&x, &y, &design.weights_norm)?),
    };
    let j = meat_cluster_rows(&wt.score_rows, &design.weights_norm, &design, policy)?;
    let v_wt = sandwich(&wt.bread, &j)?;
    let var_uw: Vec<f64> = (0..uw.coef.len()).map(|k| uw.cov[(k, k)]).collect();
    let var_wt: Vec<f64> = (0..wt.coef.len()).map(|k| v_wt[(k, k)]).collect();
    hausman(&uw.coef, &wt.coef, &var_uw, &var_wt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(strata: Vec<usize>, psus: Vec<usize>, w: Vec<f64>) -> SurveyDesign {
        SurveyDesign { strata, psus, weights_norm: normalize_weights(&w).unwrap(), weights_raw: w }
    }

    #[test]
    fn normalization_and_kish() {
        assert_eq!(normalize_weights(&[4.0; 5]).unwrap(), vec![1.0; 5]);
        assert!(normalize_weights(&[1.0, 0.0]).is_err());
        let (d, e) = kish(&[2.0; 10]).unwrap();
        assert_eq!((d, e), (1.0, 10.0));
        // (1,1,4): mean 2, population variance 2, CV² = 0.5.
        let (d, e) = kish(&[1.0, 1.0, 4.0]).unwrap();
        assert!((d - 1.5).abs() < 1e-15 && (e - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bvm_examples() {
        assert!((bvm_delta_from_ratio(462.0, 6785) - 0.695).abs() < 1e-3);
        assert!((bvm_delta_from_ratio(50.0, 6785) - 0.443).abs() < 1e-3);
        let (d, f) = bvm_weight_diagnostic(&[3.0; 4], 4).unwrap();
        assert_eq!((d, f), (0.0, false));
    }

    #[test]
    fn meat_hand_computation() {
        // Two strata, two PSUs each, one observation per PSU.
        let d = design(vec![0, 0, 1, 1], vec![0, 1, 0, 1], vec![1.0; 4]);
        let rows = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![-1.0, 1.0], vec![1.0, 1.0]];
        let j = meat_cluster_rows(&rows, &d.weights_norm, &d, SingletonPolicy::Error).unwrap();
        // Stratum 0: deviations ±(1, 1); stratum 1: ±(1, 0); factor 2 each.
        let want = DMatrix::from_row_slice(2, 2, &[2.0 * 2.0 + 2.0 * 2.0, 2.0 * 2.0, 2.0 * 2.0, 2.0 * 2.0]);
        assert!((j - want).amax() < 1e-14);
        // Identical PSU totals give zero.
        let rows = vec![vec![1.0, 2.0]; 4];
        assert_eq!(meat_cluster_rows(&rows, &d.weights_norm, &d, SingletonPolicy::Error).unwrap().amax(), 0.0);
    }

    #[test]
    fn singleton_strata() {
        let d = design(vec![0, 0, 1], vec![0, 1, 0], vec![1.0; 3]);
        let rows = vec![vec![1.0], vec![2.0], vec![4.0]];
        let err = meat_cluster_rows(&rows, &d.weights_norm, &d, SingletonPolicy::Error).unwrap_err();
        assert!(matches!(err, Error::Design(m) if m.contains("stratum 1")));
        let j = meat_cluster_rows(&rows, &d.weights_norm, &d, SingletonPolicy::Collapse).unwrap();
        // One stratum with three PSUs: totals 1, 2, 4, mean 7/3.
        let want = 1.5 * ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2));
        assert!((j[(0, 0)] - want).abs() < 1e-12);
    }

    #[test]
    fn sandwich_identities() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let v = sandwich(&h, &h).unwrap();
        let hinv = h.clone().try_inverse().unwrap();
        assert!((&v - &hinv).amax() < 1e-14);
        let (d, c) = der(&v, &h).unwrap();
        assert!(d.iter().all(|x| (x - 1.0).abs() < 1e-13));
        assert!(c.iter().all(|c| *c == DerClass::Insensitive));
        let s = sandwich(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert!((s[(0, 0)] - 0.75).abs() < 1e-15);
        let j = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let want = &hinv * &j * &hinv;
        assert!((sandwich(&h, &j).unwrap() - want).amax() < 1e-12);
    }

    #[test]
    fn der_formulas() {
        assert_eq!(der_exact(0.0, 3.0), 1.0);
        assert_eq!(der_exact(1.0, 3.0), 1.0);
        assert!((der_heuristic(0.5, 3.0) - 2.0).abs() < 1e-15);
        assert!((der_exact(0.5, 3.0) - 2.5 / 2.25).abs() < 1e-15);
        assert_eq!(DerClass::of(1.3), DerClass::Moderate);
        assert_eq!(DerClass::of(1.51), DerClass::Sensitive);
    }

    #[test]
    fn calibration_exactness() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let draws: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                vec![1.0 + a, 2.0 + 0.5 * a + b, -c, 9.0]
            })
            .collect();
        let v = DMatrix::from_row_slice(3, 3, &[2.0, 0.4, 0.1, 0.4, 1.0, 0.0, 0.1, 0.0, 0.5]);
        let th = [1.1, 1.9, 0.1, 9.0];
        for t in [CalibrationTransform::Cholesky, CalibrationTransform::SymmetricRoot] {
            let out = cholesky_calibrate(&draws, &th, &v, &[0, 1, 2], t).unwrap();
            let m = out.len() as f64;
            let mean: Vec<f64> = (0..3).map(|j| out.iter().map(|d| d[j]).sum::<f64>() / m).collect();
            for j in 0..3 {
                assert!((mean[j] - th[j]).abs() < 1e-12);
            }
            for a in 0..3 {
                for b in 0..3 {
                    let c = out.iter().map(|d| (d[a] - mean[a]) * (d[b] - mean[b])).sum::<f64>() / m;
                    assert!((c - v[(a, b)]).abs() < 1e-10 * v[(a, a)].max(v[(b, b)]));
                }
            }
            assert!(out.iter().all(|d| d[3] == 9.0));
        }
    }

    #[test]
    fn hausman_guard_and_example() {
        let r = hausman(&[0.176], &[0.234], &[0.0004], &[0.0004 + (0.058f64 / 2.02).powi(2)]).unwrap();
        assert!((r[0].z.unwrap() - 2.02).abs() < 1e-12);
        assert!((r[0].p_value.unwrap() - 0.0434).abs() < 1e-3);
        let r = hausman(&[0.1], &[0.2], &[0.5], &[0.4]).unwrap();
        assert!(r[0].flagged && r[0].z.is_none());
        let r = hausman(&[0.3], &[0.3], &[0.5], &[0.4]).unwrap();
        assert_eq!((r[0].z, r[0].p_value), (Some(0.0), Some(1.0)));
    }

    #[test]
    fn design_dof() {
        let strata: Vec<usize> = (0..415).map(|c| c % 30).collect();
        let d = design(strata, (0..415).collect(), vec![1.0; 415]);
        assert_eq!(d.dof(), 385);
    }
}
