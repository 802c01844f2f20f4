//! Design-calibrated Monte Carlo harness.
//!
//! Each replication builds a finite population of providers across 51 states,
//! draws a Poisson sample with size-biased inclusion probabilities, and fits
//! the random-intercept model three ways: unweighted (E-UW), weighted with
//! model-based intervals (E-WT), and weighted with sandwich intervals (E-WS).

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbkernel::{sample_ztbb, zero_prob, BetaBinParams};
use crate::error::{Error, Result};
use crate::infer::{self, derive_seed, Engine, MapOptions, McmcConfig};
use crate::model::{quantile, ModelStructure, Observation, ParamVector, Variant};
use crate::scores;
use crate::special::{expit, norm_quantile};
use crate::survey::{kish, normalize_weights, SandwichResult, SingletonPolicy, SurveyDesign};

/// Number of states.
pub const N_STATES: usize = 51;
/// Number of strata (groups of adjacent states).
pub const N_STRATA: usize = 10;
/// PSUs per stratum in the synthetic frame.
pub const PSUS_PER_STRATUM: usize = 8;
/// Covariate count including the intercept.
pub const P: usize = 5;
/// Column of the poverty covariate.
pub const POVERTY: usize = 1;

/// Data-generating parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Extensive coefficients (intercept, poverty, urban, Black, Hispanic).
    pub alpha0: [f64; P],
    /// Intensive coefficients.
    pub beta0: [f64; P],
    /// log κ.
    pub log_kappa0: f64,
    /// State intercept SD, extensive.
    pub tau_ext: f64,
    /// State intercept SD, intensive.
    pub tau_int: f64,
    /// Correlation of the two state intercepts.
    pub rho_cross: f64,
    /// SD of state poverty slopes, extensive.
    pub gamma_sd_ext: f64,
    /// SD of state poverty slopes, intensive.
    pub gamma_sd_int: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self {
            alpha0: [0.696, -0.119, 0.253, -0.070, -0.139],
            beta0: [-0.032, 0.057, -0.018, 0.080, 0.040],
            log_kappa0: 1.655,
            tau_ext: 0.577,
            tau_int: 0.208,
            rho_cross: 0.285,
            gamma_sd_ext: 0.0,
            gamma_sd_int: 0.0,
        }
    }
}

impl TruthConfig {
    /// Default truth with state-varying poverty slopes.
    pub fn misspecified() -> Self {
        Self { gamma_sd_ext: 0.15, gamma_sd_int: 0.10, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau_ext >= 0.0 && self.tau_int >= 0.0 && self.gamma_sd_ext >= 0.0 && self.gamma_sd_int >= 0.0) {
            return Err(Error::Domain("standard deviations must be non-negative".into()));
        }
        if !(self.rho_cross > -1.0 && self.rho_cross < 1.0) {
            return Err(Error::Domain(format!("rho_cross = {} must lie in (-1, 1)", self.rho_cross)));
        }
        Ok(())
    }
}

/// Scenario label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioName {
    /// Non-informative baseline.
    S0,
    /// Moderately informative.
    S3,
    /// Strongly informative.
    S4,
    /// S3 sampling with state-varying poverty slopes in the truth.
    B5,
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S0" => Ok(Self::S0),
            "S3" => Ok(Self::S3),
            "S4" => Ok(Self::S4),
            "B5" => Ok(Self::B5),
            _ => Err(Error::Data(format!("unknown scenario '{s}'"))),
        }
    }
}

/// Size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    /// Population 10,000, sample 1,000, 50 replications.
    Desk,
    /// Population 50,000, sample 7,000, 200 replications.
    Full,
}

/// Simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Label.
    pub name: ScenarioName,
    /// Informativeness ρ_inc.
    pub rho_inc: f64,
    /// Expected sample size.
    pub target_n: usize,
    /// Population size.
    pub population_size: usize,
    /// Replication count.
    pub replications: usize,
    /// Interval level.
    pub nominal_level: f64,
    /// Multiplier on ρ_inc·y* in log π.
    pub informativeness_scale: f64,
    /// Kish DEFF produced by the non-informative PSU jitter alone.
    pub baseline_deff: f64,
    /// Data-generating parameters.
    pub truth: TruthConfig,
}

/// Multiplier on ρ_inc that puts the median S3 Kish DEFF near 3.8 on the synthetic frame.
pub const S3_INFORMATIVENESS_SCALE: f64 = 6.4;
/// Multiplier on ρ_inc that puts the median S4 Kish DEFF near 5.0.
pub const S4_INFORMATIVENESS_SCALE: f64 = 2.5;

impl Scenario {
    /// Preset for a label and scale.
    pub fn preset(name: ScenarioName, scale: Scale) -> Self {
        let rho_inc = match name {
            ScenarioName::S0 => 0.0,
            ScenarioName::S3 | ScenarioName::B5 => 0.15,
            ScenarioName::S4 => 0.50,
        };
        let (population_size, target_n, replications) = match scale {
            Scale::Desk => (10_000, 1_000, 50),
            Scale::Full => (50_000, 7_000, 200),
        };
        let truth = if name == ScenarioName::B5 { TruthConfig::misspecified() } else { TruthConfig::default() };
        Self {
            name,
            rho_inc,
            target_n,
            population_size,
            replications,
            nominal_level: 0.90,
            informativeness_scale: if name == ScenarioName::S4 { S4_INFORMATIVENESS_SCALE } else { S3_INFORMATIVENESS_SCALE },
            baseline_deff: 2.0,
            truth,
        }
    }

    /// Checks sizes and levels.
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        if self.replications == 0 {
            return Err(Error::Data("replications must be positive".into()));
        }
        if self.population_size < N_STATES * 20 {
            return Err(Error::Data(format!("population_size must be at least {}", N_STATES * 20)));
        }
        if self.target_n == 0 || self.target_n >= self.population_size {
            return Err(Error::Data("target_n must be positive and below population_size".into()));
        }
        if !(self.nominal_level > 0.0 && self.nominal_level < 1.0) {
            return Err(Error::Data("nominal_level must lie in (0, 1)".into()));
        }
        if !(self.baseline_deff >= 1.0) || !self.informativeness_scale.is_finite() || !self.rho_inc.is_finite() {
            return Err(Error::Data("baseline_deff must be at least 1 and scales finite".into()));
        }
        if self.name == ScenarioName::B5 && self.truth.gamma_sd_ext == 0.0 && self.truth.gamma_sd_int == 0.0 {
            return Err(Error::Data("B5 requires nonzero state slope SDs".into()));
        }
        Ok(())
    }
}

/// One population unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    /// Standardized covariates with leading 1.
    pub x: [f64; P],
    /// Denominator.
    pub n: u32,
    /// Count.
    pub y: u32,
    /// State.
    pub state: usize,
    /// Stratum.
    pub stratum: usize,
    /// PSU within stratum.
    pub psu: usize,
    /// Participation probability.
    pub q: f64,
    /// Intensive mean.
    pub mu: f64,
    /// Standardized expected count q·n·μ/(1 − p0).
    pub y_star: f64,
}

/// Finite population with its realized state effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    /// Units.
    pub units: Vec<Unit>,
    /// (δ_ext, δ_int) per state.
    pub delta: Vec<[f64; 2]>,
    /// (γ_ext, γ_int) per state.
    pub gamma: Vec<[f64; 2]>,
}

impl Population {
    /// Fraction of structural zeros.
    pub fn zero_fraction(&self) -> f64 {
        self.units.iter().filter(|u| u.y == 0).count() as f64 / self.units.len() as f64
    }
}

fn state_sizes(size: usize) -> Vec<usize> {
    let profile: Vec<f64> = (0..N_STATES).map(|s| 1.0 + ((s * 29) % N_STATES) as f64 / 10.0).collect();
    let total: f64 = profile.iter().sum();
    let extra = size - 20 * N_STATES;
    let raw: Vec<f64> = profile.iter().map(|p| p / total * extra as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| 20 + r.floor() as usize).collect();
    let mut rem = size - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..N_STATES).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &s in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        sizes[s] += 1;
        rem -= 1;
    }
    sizes
}

/// Stratum of a state: contiguous groups of about five states.
pub fn stratum_of(state: usize) -> usize {
    state * N_STRATA / N_STATES
}

/// Builds a finite population.
///
/// Covariates: poverty is Gamma with CV 0.48 times a state-level log-normal
/// shift, urban is Bernoulli(0.93), Black and Hispanic shares are two-component
/// Beta mixtures; all four are standardized. Trial sizes are rounded
/// log-normal with median 48, clipped to [4, 378].
pub fn generate_population(truth: &TruthConfig, size: usize, seed: u64) -> Result<Population> {
    truth.validate()?;
    if size < N_STATES * 20 {
        return Err(Error::Data(format!("population size {size} is below {}", N_STATES * 20)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = state_sizes(size);
    let cv = 0.48f64;
    let pov_dist = Gamma::new(1.0 / (cv * cv), cv * cv).expect("valid gamma");
    let blk_lo = Beta::new(1.0, 12.0).expect("valid beta");
    let blk_hi = Beta::new(2.0, 3.0).expect("valid beta");
    let his_lo = Beta::new(1.0, 8.0).expect("valid beta");
    let his_hi = Beta::new(2.0, 4.0).expect("valid beta");
    let n_dist = LogNormal::new(48f64.ln(), 0.9).expect("valid log-normal");

    let shift: Vec<f64> = (0..N_STATES).map(|_| (0.25 * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let mut raw: Vec<([f64; P], u32, usize)> = Vec::with_capacity(size);
    for (s, &m) in sizes.iter().enumerate() {
        for _ in 0..m {
            let pov = pov_dist.sample(&mut rng) * shift[s];
            let urb = f64::from(u8::from(rng.random::<f64>() < 0.93));
            let blk = if rng.random::<f64>() < 0.7 { blk_lo.sample(&mut rng) } else { blk_hi.sample(&mut rng) };
            let his = if rng.random::<f64>() < 0.7 { his_lo.sample(&mut rng) } else { his_hi.sample(&mut rng) };
            let n = n_dist.sample(&mut rng).round().clamp(4.0, 378.0) as u32;
            raw.push(([1.0, pov, urb, blk, his], n, s));
        }
    }
    // Frame: within a stratum, units sorted by (state, poverty) and cut into equal blocks.
    let mut psu = vec![0usize; size];
    for h in 0..N_STRATA {
        let mut idx: Vec<usize> = (0..size).filter(|&i| stratum_of(raw[i].2) == h).collect();
        idx.sort_by(|&a, &b| raw[a].2.cmp(&raw[b].2).then(raw[a].0[POVERTY].total_cmp(&raw[b].0[POVERTY])));
        let m = idx.len();
        for (r, &i) in idx.iter().enumerate() {
            psu[i] = r * PSUS_PER_STRATUM / m;
        }
    }
    for c in 1..P {
        let m = raw.iter().map(|r| r.0[c]).sum::<f64>() / size as f64;
        let sd = (raw.iter().map(|r| (r.0[c] - m).powi(2)).sum::<f64>() / size as f64).sqrt();
        for r in raw.iter_mut() {
            r.0[c] = if sd > 0.0 { (r.0[c] - m) / sd } else { 0.0 };
        }
    }

    let rho = truth.rho_cross;
    let delta: Vec<[f64; 2]> = (0..N_STATES)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [truth.tau_ext * a, truth.tau_int * (rho * a + (1.0 - rho * rho).sqrt() * b)]
        })
        .collect();
    let gamma: Vec<[f64; 2]> = (0..N_STATES)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            [truth.gamma_sd_ext * a, truth.gamma_sd_int * b]
        })
        .collect();
    let kappa = truth.log_kappa0.exp();
    let mut units = Vec::with_capacity(size);
    for (i, (x, n, s)) in raw.into_iter().enumerate() {
        let dot = |c: &[f64; P]| x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
        let q = expit(dot(&truth.alpha0) + delta[s][0] + gamma[s][0] * x[POVERTY]);
        let mu = expit(dot(&truth.beta0) + delta[s][1] + gamma[s][1] * x[POVERTY]);
        let (bb, _) = BetaBinParams::clamped(n, mu, kappa);
        let y = if rng.random::<f64>() < q { sample_ztbb(&bb, &mut rng)? } else { 0 };
        let y_star = q * f64::from(n) * bb.mu / (1.0 - zero_prob(&bb));
        units.push(Unit { x, n, y, state: s, stratum: stratum_of(s), psu: psu[i], q, mu, y_star });
    }
    let m = units.iter().map(|u| u.y_star).sum::<f64>() / size as f64;
    let sd = (units.iter().map(|u| (u.y_star - m).powi(2)).sum::<f64>() / size as f64).sqrt();
    for u in units.iter_mut() {
        u.y_star = if sd > 0.0 { (u.y_star - m) / sd } else { 0.0 };
    }
    Ok(Population { units, delta, gamma })
}

/// A drawn sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Sampled observations with raw weights 1/π.
    pub data: Vec<Observation>,
    /// Population index of each sampled unit.
    pub index: Vec<usize>,
    /// Solved intercept c₀.
    pub c0: f64,
    /// Fraction of population units with π clipped at 1.
    pub clip_fraction: f64,
    /// Kish DEFF of the realized weights.
    pub kish_deff: f64,
}

/// Poisson sample with log π_i = c₀ + k·ρ_inc·y*_i + u_psu.
///
/// The PSU jitter is a mean-zero normal with variance log(`baseline_deff`), so
/// that ρ_inc = 0 gives Kish DEFF near `baseline_deff`; c₀ is solved by
/// bisection so that Σ min(π_i, 1) equals `target_n`.
pub fn draw_sample(pop: &Population, scenario: &Scenario, seed: u64) -> Result<Sample> {
    let size = pop.units.len();
    if scenario.target_n == 0 || scenario.target_n >= size {
        return Err(Error::Data("target_n must be positive and below the population size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = scenario.baseline_deff.ln().sqrt();
    let u_psu: Vec<f64> = (0..N_STRATA * PSUS_PER_STRATUM).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let slope = scenario.informativeness_scale * scenario.rho_inc;
    let lin: Vec<f64> = pop
        .units
        .iter()
        .map(|u| slope * u.y_star + u_psu[u.stratum * PSUS_PER_STRATUM + u.psu])
        .collect();
    let expected = |c0: f64| lin.iter().map(|l| (c0 + l).exp().min(1.0)).sum::<f64>();
    let target = scenario.target_n as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c0 = 0.5 * (lo + hi);
    let pi: Vec<f64> = lin.iter().map(|l| (c0 + l).exp().min(1.0)).collect();
    let clip_fraction = pi.iter().filter(|&&p| p >= 1.0).count() as f64 / size as f64;
    let mut data = Vec::new();
    let mut index = Vec::new();
    for (i, u) in pop.units.iter().enumerate() {
        if rng.random::<f64>() < pi[i] {
            data.push(Observation {
                y: u.y,
                n: u.n,
                x: u.x.to_vec(),
                state: u.state,
                stratum: u.stratum,
                psu: u.psu,
                w_raw: 1.0 / pi[i],
            });
            index.push(i);
        }
    }
    if data.len() < 2 {
        return Err(Error::Data("sample has fewer than two units".into()));
    }
    let w: Vec<f64> = data.iter().map(|o| o.w_raw).collect();
    let (kish_deff, _) = kish(&w)?;
    Ok(Sample { data, index, c0, clip_fraction, kish_deff })
}

/// Estimator label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    /// Unweighted likelihood, model-based intervals.
    #[serde(rename = "E-UW")]
    Uw,
    /// Weighted pseudo-likelihood, model-based intervals.
    #[serde(rename = "E-WT")]
    Wt,
    /// Weighted pseudo-likelihood, sandwich intervals for α, β, log κ.
    #[serde(rename = "E-WS")]
    Ws,
}

impl Estimator {
    /// All three, in table order.
    pub const ALL: [Estimator; 3] = [Estimator::Uw, Estimator::Wt, Estimator::Ws];
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Uw => "E-UW",
            Estimator::Wt => "E-WT",
            Estimator::Ws => "E-WS",
        })
    }
}

/// Tracked parameters, in table order.
pub const TRACKED: [&str; 5] = ["alpha_pov", "beta_pov", "log_kappa", "tau_ext", "tau_int"];

/// Estimate and interval for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    /// Parameter name.
    pub name: String,
    /// True value.
    pub truth: f64,
    /// Point estimate.
    pub estimate: f64,
    /// Lower bound.
    pub lo: f64,
    /// Upper bound.
    pub hi: f64,
    /// lo ≤ truth ≤ hi.
    pub covered: bool,
    /// hi − lo.
    pub width: f64,
}

impl ParamEstimate {
    fn new(name: &str, truth: f64, estimate: f64, lo: f64, hi: f64) -> Self {
        Self { name: name.into(), truth, estimate, lo, hi, covered: lo <= truth && truth <= hi, width: hi - lo }
    }
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    /// Replication index.
    pub replication: usize,
    /// Estimator.
    pub estimator: Estimator,
    /// Engine.
    pub engine: Engine,
    /// Seed of the replication.
    pub seed: u64,
    /// Realized sample size.
    pub n_sample: usize,
    /// Realized Kish DEFF.
    pub kish_deff: f64,
    /// Fraction of clipped inclusion probabilities.
    pub clip_fraction: f64,
    /// Error message when the fit failed.
    pub error: Option<String>,
    /// Tracked parameters (empty on failure).
    pub params: Vec<ParamEstimate>,
}

impl ReplicationRecord {
    /// True when the fit succeeded.
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn truths(truth: &TruthConfig) -> [f64; 5] {
    [truth.alpha0[POVERTY], truth.beta0[POVERTY], truth.log_kappa0, truth.tau_ext, truth.tau_int]
}

/// Flat indices of α_pov, β_pov, log κ, log τ_ext, log τ_int.
fn tracked_indices(ms: &ModelStructure) -> [usize; 5] {
    let lay = ms.layout();
    [lay.alpha.start + POVERTY, lay.beta.start + POVERTY, lay.log_kappa, lay.log_tau.start, lay.log_tau.start + ms.q]
}

fn map_intervals(fit: &infer::FitResult, ms: &ModelStructure, truth: &TruthConfig, z: f64) -> Result<Vec<ParamEstimate>> {
    let cov = fit.mode_hessian.as_ref().ok_or_else(|| Error::Numeric("missing mode Hessian".into()))?.covariance()?;
    let idx = tracked_indices(ms);
    let t = truths(truth);
    Ok((0..5)
        .map(|k| {
            let j = idx[k];
            let (e, s) = (fit.flat_hat[j], cov[(j, j)].max(0.0).sqrt());
            if k >= 3 {
                ParamEstimate::new(TRACKED[k], t[k], e.exp(), (e - z * s).exp(), (e + z * s).exp())
            } else {
                ParamEstimate::new(TRACKED[k], t[k], e, e - z * s, e + z * s)
            }
        })
        .collect())
}

fn mcmc_intervals(fit: &infer::FitResult, ms: &ModelStructure, truth: &TruthConfig, level: f64) -> Vec<ParamEstimate> {
    let idx = tracked_indices(ms);
    let t = truths(truth);
    let tail = (1.0 - level) / 2.0;
    (0..5)
        .map(|k| {
            let v: Vec<f64> = fit.draws.iter().map(|d| if k >= 3 { d[idx[k]].exp() } else { d[idx[k]] }).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            ParamEstimate::new(TRACKED[k], t[k], mean, quantile(&v, tail), quantile(&v, 1.0 - tail))
        })
        .collect()
}

fn point(fit: &infer::FitResult, ms: &ModelStructure, truth: &TruthConfig, engine: Engine, level: f64) -> Result<Vec<ParamEstimate>> {
    match engine {
        Engine::Map => map_intervals(fit, ms, truth, norm_quantile(0.5 + level / 2.0)),
        Engine::Mcmc => Ok(mcmc_intervals(fit, ms, truth, level)),
    }
}

fn sandwich_params(
    fit: &infer::FitResult,
    data: &[Observation],
    w: &[f64],
    ms: &ModelStructure,
    wt: &[ParamEstimate],
    z: f64,
) -> Result<Vec<ParamEstimate>> {
    let design = SurveyDesign::from_observations(data)?;
    let h = scores::hessian(&fit.theta_hat, data, Some(w), ms, true)?;
    let sm = scores::score_matrix(&fit.theta_hat, data, ms, true)?;
    let re = fit.theta_hat.deviation_covariance();
    let sw = SandwichResult::compute_profiled(&h, &sm, &design, &re, SingletonPolicy::Collapse)?;
    let idx = tracked_indices(ms);
    let mut out = wt.to_vec();
    for k in 0..3 {
        let s = sw.v_sand[(idx[k], idx[k])].max(0.0).sqrt();
        let e = wt[k].estimate;
        out[k] = ParamEstimate::new(TRACKED[k], wt[k].truth, e, e - z * s, e + z * s);
    }
    Ok(out)
}

/// Fitted model for simulation replications: M1 on the five covariates.
pub fn fit_structure() -> ModelStructure {
    ModelStructure::new(Variant::M1, P, N_STATES, None).expect("valid M1 structure")
}

/// Runs one replication and returns one record per estimator.
pub fn run_replication(scenario: &Scenario, replication: usize, base_seed: u64, engine: Engine) -> Result<Vec<ReplicationRecord>> {
    scenario.validate()?;
    let seed = derive_seed(base_seed, replication as u64);
    let pop = generate_population(&scenario.truth, scenario.population_size, derive_seed(seed, 0))?;
    let sample = draw_sample(&pop, scenario, derive_seed(seed, 1))?;
    let ms = fit_structure();
    let data = &sample.data;
    let w = normalize_weights(&data.iter().map(|o| o.w_raw).collect::<Vec<_>>())?;
    let level = scenario.nominal_level;
    let z = norm_quantile(0.5 + level / 2.0);
    let record = |estimator, r: Result<Vec<ParamEstimate>>| {
        let (params, error) = match r {
            Ok(p) => (p, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        ReplicationRecord {
            replication,
            estimator,
            engine,
            seed,
            n_sample: data.len(),
            kish_deff: sample.kish_deff,
            clip_fraction: sample.clip_fraction,
            error,
            params,
        }
    };
    let fit = |weights: Option<&[f64]>, init: Option<&ParamVector>, stream: u64| -> Result<infer::FitResult> {
        match engine {
            Engine::Map => infer::fit_map(data, weights, &ms, init, &MapOptions::default()),
            Engine::Mcmc => {
                let cfg = McmcConfig { seed: derive_seed(seed, stream), ..McmcConfig::default() };
                infer::sample_mcmc(data, weights, &ms, init, &cfg)
            }
        }
    };
    let uw_fit = fit(None, None, 2);
    let uw = uw_fit.as_ref().map_err(Clone::clone).and_then(|f| point(f, &ms, &scenario.truth, engine, level));
    let init = uw_fit.as_ref().ok().map(|f| f.theta_hat.clone());
    let wt_fit = fit(Some(&w), init.as_ref(), 3);
    let wt = wt_fit.as_ref().map_err(Clone::clone).and_then(|f| point(f, &ms, &scenario.truth, engine, level));
    let ws = match (&wt_fit, &wt) {
        (Ok(f), Ok(p)) => sandwich_params(f, data, &w, &ms, p, z),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    Ok(vec![record(Estimator::Uw, uw), record(Estimator::Wt, wt), record(Estimator::Ws, ws)])
}

/// Runs every replication of a scenario in parallel, in index order.
pub fn run_campaign(scenario: &Scenario, base_seed: u64, engine: Engine) -> Result<Vec<ReplicationRecord>> {
    scenario.validate()?;
    let per: Vec<Result<Vec<ReplicationRecord>>> =
        (0..scenario.replications).into_par_iter().map(|r| run_replication(scenario, r, base_seed, engine)).collect();
    let mut out = Vec::with_capacity(3 * scenario.replications);
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

/// Metrics for one (parameter, estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Parameter.
    pub parameter: String,
    /// Estimator.
    pub estimator: Estimator,
    /// Successful replications.
    pub n: usize,
    /// Fraction of intervals covering the truth.
    pub coverage: f64,
    /// √(p̂(1 − p̂)/R).
    pub mcse: f64,
    /// 100·(mean − truth)/|truth|.
    pub rb: f64,
    /// Root mean squared error.
    pub rmse: f64,
    /// Median interval width.
    pub median_width: f64,
    /// Median width over the E-WT median width (E-WS rows only).
    pub wr: Option<f64>,
    /// |coverage − nominal| > 2·MCSE.
    pub flagged: bool,
}

/// Aggregated metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Interval level.
    pub nominal: f64,
    /// Rows in (parameter, estimator) order.
    pub rows: Vec<MetricRow>,
    /// Failed records per estimator.
    pub failures: Vec<(Estimator, usize)>,
}

impl MetricTable {
    /// Looks up a cell.
    pub fn get(&self, parameter: &str, estimator: Estimator) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.parameter == parameter && r.estimator == estimator)
    }
}

/// Aggregates replication records; order of `records` does not matter.
pub fn aggregate_metrics(records: &[ReplicationRecord], nominal: f64) -> Result<MetricTable> {
    let mut sorted: Vec<&ReplicationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.replication, r.estimator));
    let failures = Estimator::ALL
        .iter()
        .map(|&e| (e, sorted.iter().filter(|r| r.estimator == e && !r.ok()).count()))
        .collect();
    let mut names: Vec<String> = Vec::new();
    for r in &sorted {
        for p in &r.params {
            if !names.contains(&p.name) {
                names.push(p.name.clone());
            }
        }
    }
    let cell = |name: &str, e: Estimator| -> Vec<&ParamEstimate> {
        sorted
            .iter()
            .filter(|r| r.estimator == e && r.ok())
            .filter_map(|r| r.params.iter().find(|p| p.name == name))
            .collect()
    };
    let median_width = |v: &[&ParamEstimate]| {
        let w: Vec<f64> = v.iter().map(|p| p.width).collect();
        quantile(&w, 0.5)
    };
    let mut rows = Vec::new();
    for name in &names {
        for e in Estimator::ALL {
            let v = cell(name, e);
            if v.is_empty() {
                continue;
            }
            if v.len() < 2 {
                return Err(Error::Data(format!("cell ({name}, {e}) has fewer than two successful records")));
            }
            let r = v.len() as f64;
            let cov = v.iter().filter(|p| p.covered).count() as f64 / r;
            let mcse = (cov * (1.0 - cov) / r).sqrt();
            let truth = v[0].truth;
            let mean = v.iter().map(|p| p.estimate).sum::<f64>() / r;
            let rmse = (v.iter().map(|p| (p.estimate - p.truth).powi(2)).sum::<f64>() / r).sqrt();
            let mw = median_width(&v);
            let wr = if e == Estimator::Ws {
                let wt = cell(name, Estimator::Wt);
                (!wt.is_empty()).then(|| mw / median_width(&wt))
            } else {
                None
            };
            rows.push(MetricRow {
                parameter: name.clone(),
                estimator: e,
                n: v.len(),
                coverage: cov,
                mcse,
                rb: 100.0 * (mean - truth) / truth.abs(),
                rmse,
                median_width: mw,
                wr,
                flagged: (cov - nominal).abs() > 2.0 * mcse,
            });
        }
    }
    Ok(MetricTable { nominal, rows, failures })
}

/// Covariance of two state-effect draws, for reference in tests and reports.
pub fn state_covariance(truth: &TruthConfig) -> DMatrix<f64> {
    let c = truth.rho_cross * truth.tau_ext * truth.tau_int;
    DMatrix::from_row_slice(2, 2, &[truth.tau_ext.powi(2), c, c, truth.tau_int.powi(2)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(rep: usize, est: Estimator, truth: f64, estimate: f64, lo: f64, hi: f64) -> ReplicationRecord {
        ReplicationRecord {
            replication: rep,
            estimator: est,
            engine: Engine::Map,
            seed: 0,
            n_sample: 10,
            kish_deff: 1.0,
            clip_fraction: 0.0,
            error: None,
            params: vec![ParamEstimate::new("a", truth, estimate, lo, hi)],
        }
    }

    #[test]
    fn metric_arithmetic() {
        let recs: Vec<_> = (0..4).map(|r| rec(r, Estimator::Uw, 2.0, 2.2, if r == 0 { 2.1 } else { 1.0 }, 3.0)).collect();
        let t = aggregate_metrics(&recs, 0.9).unwrap();
        let row = t.get("a", Estimator::Uw).unwrap();
        assert_eq!(row.coverage, 0.75);
        assert!((row.mcse - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
        assert!((row.rb - 10.0).abs() < 1e-12);
        assert!((row.rmse - 0.2).abs() < 1e-12);
        let all: Vec<_> = (0..5).map(|r| rec(r, Estimator::Uw, 2.0, 2.0, 1.0, 3.0)).collect();
        let row = aggregate_metrics(&all, 0.9).unwrap().rows[0].clone();
        assert_eq!((row.coverage, row.mcse), (1.0, 0.0));
    }

    #[test]
    fn metric_order_invariance_and_wr() {
        let mut recs = Vec::new();
        for r in 0..6 {
            recs.push(rec(r, Estimator::Wt, 1.0, 1.0 + 0.01 * r as f64, 0.9, 1.1));
            recs.push(rec(r, Estimator::Ws, 1.0, 1.0 + 0.01 * r as f64, 0.8, 1.2));
        }
        let a = aggregate_metrics(&recs, 0.9).unwrap();
        recs.reverse();
        recs.swap(1, 7);
        let b = aggregate_metrics(&recs, 0.9).unwrap();
        assert_eq!(a, b);
        assert!((a.get("a", Estimator::Ws).unwrap().wr.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn state_sizes_sum() {
        for size in [1020, 10_000, 50_000] {
            let s = state_sizes(size);
            assert_eq!(s.iter().sum::<usize>(), size);
            assert!(s.iter().all(|&v| v >= 20));
        }
    }

    #[test]
    fn population_shape() {
        let pop = generate_population(&TruthConfig::default(), 20_000, 3).unwrap();
        assert_eq!(pop.units.len(), 20_000);
        let zf = pop.zero_fraction();
        assert!((zf - 0.36).abs() < 0.05, "{zf}");
        for h in 0..N_STRATA {
            let psus: std::collections::BTreeSet<usize> = pop.units.iter().filter(|u| u.stratum == h).map(|u| u.psu).collect();
            assert_eq!(psus.len(), PSUS_PER_STRATUM);
        }
        let none = TruthConfig { tau_ext: 0.0, tau_int: 0.0, ..TruthConfig::default() };
        let pop = generate_population(&none, 2_000, 4).unwrap();
        assert!(pop.delta.iter().all(|d| d[0] == 0.0 && d[1] == 0.0));
    }

    #[test]
    fn sample_size_and_replay() {
        let sc = Scenario::preset(ScenarioName::S0, Scale::Desk);
        let pop = generate_population(&sc.truth, sc.population_size, 1).unwrap();
        let a = draw_sample(&pop, &sc, 9).unwrap();
        let b = draw_sample(&pop, &sc, 9).unwrap();
        assert_eq!(a, b);
        assert!((a.data.len() as f64 - 1000.0).abs() < 100.0);
    }
}
