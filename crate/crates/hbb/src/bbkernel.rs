//! Beta-binomial and zero-truncated beta-binomial distribution math.
//!
//! All quantities use the mean–precision form: shapes a = μκ and b = (1−μ)κ.
//! Log-space products and finite sums keep the kernel stable for n up to a
//! few thousand.

use rand::Rng;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{ln_choose, ln_one_minus_exp, ln_rising};

/// Lower and upper clamp for μ at the kernel boundary.
pub const MU_CLAMP: (f64, f64) = (1e-12, 1.0 - 1e-12);
/// Lower and upper clamp for κ at the kernel boundary.
pub const KAPPA_CLAMP: (f64, f64) = (1e-8, 1e8);
/// Default cap on zero-rejection loops in [`sample_ztbb`].
pub const DEFAULT_REJECTION_CAP: usize = 10_000;
/// Cells with p0 at or above this value are refused by the sampler.
pub const MAX_SAMPLER_P0: f64 = 0.999;

/// One beta-binomial cell (n, μ, κ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaBinParams {
    /// Trial count, at least 1.
    pub n: u32,
    /// Mean success probability in (0, 1).
    pub mu: f64,
    /// Concentration, positive.
    pub kappa: f64,
}

/// Record of a clamp applied to μ or κ by [`BetaBinParams::clamped`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClampEvent {
    /// μ was moved into [`MU_CLAMP`].
    pub mu: bool,
    /// κ was moved into [`KAPPA_CLAMP`].
    pub kappa: bool,
}

impl ClampEvent {
    /// True when either parameter was clamped.
    pub fn any(&self) -> bool {
        self.mu || self.kappa
    }
}

impl BetaBinParams {
    /// Validates (n, μ, κ) and applies the numeric clamp policy.
    ///
    /// Rejects n = 0, non-finite values, μ outside (0, 1) and κ ≤ 0.
    pub fn new(n: u32, mu: f64, kappa: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("trial count n must be at least 1".into()));
        }
        if !mu.is_finite() || !(mu > 0.0 && mu < 1.0) {
            return Err(Error::Domain(format!("mu = {mu} is outside (0, 1)")));
        }
        if !kappa.is_finite() || kappa <= 0.0 {
            return Err(Error::Domain(format!("kappa = {kappa} must be positive and finite")));
        }
        Ok(Self::clamped(n, mu, kappa).0)
    }

    /// Builds a cell from any finite μ, κ by clamping into the numeric range.
    pub fn clamped(n: u32, mu: f64, kappa: f64) -> (Self, ClampEvent) {
        let mut ev = ClampEvent::default();
        let mu_c = mu.clamp(MU_CLAMP.0, MU_CLAMP.1);
        let kappa_c = kappa.clamp(KAPPA_CLAMP.0, KAPPA_CLAMP.1);
        ev.mu = mu_c != mu;
        ev.kappa = kappa_c != kappa;
        (Self { n: n.max(1), mu: mu_c, kappa: kappa_c }, ev)
    }

    /// Shape a = μκ.
    pub fn a(&self) -> f64 {
        self.mu * self.kappa
    }

    /// Shape b = (1−μ)κ.
    pub fn b(&self) -> f64 {
        (1.0 - self.mu) * self.kappa
    }
}

/// Sensitivity summary of the intensity function h(μ) = μ/(1−p0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityReport {
    /// Zero probability p0.
    pub p0: f64,
    /// Intensity h = μ/(1−p0).
    pub h: f64,
    /// Λ = κ Σ_{j<n} 1/(b+j).
    pub lambda: f64,
    /// Λ₂ = κ² Σ_{j<n} 1/(b+j)².
    pub lambda2: f64,
    /// dh/dμ = Φ/(1−p0)² with Φ = (1−p0) − μ p0 Λ.
    pub dh_dmu: f64,
    /// Elasticity ε_h = 1 − ω.
    pub elasticity: f64,
    /// ω = μ p0 Λ/(1−p0).
    pub omega: f64,
}

/// Variance decomposition of the hurdle outcome for one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    /// Unconditional variance of the hurdle count.
    pub var_total: f64,
    /// Variance-to-mean ratio.
    pub vr: f64,
    /// Overdispersion index relative to Binomial(n, qh).
    pub od: f64,
    /// Squared coefficient of variation given a positive count.
    pub cv_cond_sq: f64,
    /// Squared unconditional coefficient of variation.
    pub cv_uncond_sq: f64,
}

/// log P(Y = y) for Y ~ BetaBin(n, μ, κ).
///
/// ```
/// use hbb::bbkernel::{log_pmf, BetaBinParams};
/// let p = BetaBinParams::new(5, 0.3, 2.0).unwrap();
/// assert!((log_pmf(&p, 0).unwrap().exp() - 0.376992).abs() < 1e-6);
/// ```
pub fn log_pmf(p: &BetaBinParams, y: u32) -> Result<f64> {
    check_finite(p)?;
    if y > p.n {
        return Err(Error::Domain(format!("y = {y} exceeds n = {}", p.n)));
    }
    Ok(log_pmf_unchecked(p, y))
}

pub(crate) fn log_pmf_unchecked(p: &BetaBinParams, y: u32) -> f64 {
    let n = p.n;
    ln_choose(n, y) + ln_rising(p.a(), y) + ln_rising(p.b(), n - y) - ln_rising(p.kappa, n)
}

/// log p0 = Σ_{j<n} log(1 − a/(κ+j)).
pub fn log_zero_prob(p: &BetaBinParams) -> f64 {
    let a = p.a();
    (0..p.n).map(|j| (-a / (p.kappa + f64::from(j))).ln_1p()).sum()
}

/// P(Y = 0) = ∏_{j<n} (b+j)/(κ+j).
pub fn zero_prob(p: &BetaBinParams) -> f64 {
    log_zero_prob(p).exp()
}

/// 1 − p0 without cancellation.
pub fn positive_prob(p: &BetaBinParams) -> f64 {
    -log_zero_prob(p).exp_m1()
}

/// log(1 − p0).
pub fn log_positive_prob(p: &BetaBinParams) -> f64 {
    ln_one_minus_exp(log_zero_prob(p))
}

/// Mean nμ and variance nμ(1−μ)(n+κ)/(1+κ).
pub fn moments(p: &BetaBinParams) -> (f64, f64) {
    let n = f64::from(p.n);
    let mean = n * p.mu;
    (mean, mean * (1.0 - p.mu) * (n + p.kappa) / (1.0 + p.kappa))
}

/// r-th factorial moment E[Y(Y−1)…(Y−r+1)] = n_(r) a^(r)/κ^(r).
///
/// Returns 0 for r > n: one factor Y−j vanishes for every attainable Y.
/// Returns 1 for r = 0.
pub fn factorial_moment(p: &BetaBinParams, r: u32) -> f64 {
    if r > p.n {
        return 0.0;
    }
    let falling: f64 = (0..r).map(|j| f64::from(p.n - j).ln()).sum();
    (falling + ln_rising(p.a(), r) - ln_rising(p.kappa, r)).exp()
}

/// Mean and variance of Y given Y > 0.
pub fn truncated_moments(p: &BetaBinParams) -> (f64, f64) {
    let (mean, var) = moments(p);
    let lp0 = log_zero_prob(p);
    let p0 = lp0.exp();
    let pos = -lp0.exp_m1();
    let mean_pos = mean / pos;
    let var_pos = (var * pos - mean * mean * p0) / (pos * pos);
    (mean_pos, var_pos.max(0.0))
}

/// Intensity function h, its derivative and elasticity.
///
/// ```
/// use hbb::bbkernel::{intensity_report, BetaBinParams};
/// let r = intensity_report(&BetaBinParams::new(10, 0.3, 10.0).unwrap());
/// assert!((r.elasticity - 0.734979).abs() < 1e-6);
/// ```
pub fn intensity_report(p: &BetaBinParams) -> IntensityReport {
    let b = p.b();
    let (mut s1, mut s2) = (0.0, 0.0);
    for j in 0..p.n {
        let t = 1.0 / (b + f64::from(j));
        s1 += t;
        s2 += t * t;
    }
    let lambda = p.kappa * s1;
    let lambda2 = p.kappa * p.kappa * s2;
    let lp0 = log_zero_prob(p);
    let p0 = lp0.exp();
    let pos = -lp0.exp_m1();
    let h = p.mu / pos;
    if p.n == 1 {
        return IntensityReport { p0, h: 1.0, lambda, lambda2, dh_dmu: 0.0, elasticity: 0.0, omega: 1.0 };
    }
    let omega = p.mu * p0 * lambda / pos;
    let elasticity = 1.0 - omega;
    let dh_dmu = elasticity / pos;
    IntensityReport { p0, h, lambda, lambda2, dh_dmu, elasticity, omega }
}

/// Hurdle variance decomposition, variance ratio, overdispersion and CVs.
///
/// `q` is the participation probability, 0 < q ≤ 1.
pub fn variance_decomposition(p: &BetaBinParams, q: f64) -> Result<VarianceDecomposition> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("q = {q} is outside (0, 1]")));
    }
    let n = f64::from(p.n);
    let (mean_pos, var_pos) = truncated_moments(p);
    let lp0 = log_zero_prob(p);
    let p0 = lp0.exp();
    let pos = -lp0.exp_m1();
    let h = p.mu / pos;
    let var_total = q * var_pos + q * (1.0 - q) * mean_pos * mean_pos;
    let vr = (1.0 - p.mu) * (n + p.kappa) / (1.0 + p.kappa) - n * p.mu * p0 / pos + (1.0 - q) * n * h;
    let pi = q * h;
    let od = var_total / (n * pi * (1.0 - pi));
    let cv_cond_sq = (1.0 - p.mu) * (n + p.kappa) / (n * p.mu * (1.0 + p.kappa)) * pos - p0;
    let cv_uncond_sq = (cv_cond_sq + 1.0 - q) / q;
    Ok(VarianceDecomposition { var_total, vr, od, cv_cond_sq, cv_uncond_sq })
}

/// Access-dominance threshold (1−μ)ε_h/(1−q).
pub fn dominance_threshold(q: f64, mu: f64, kappa: f64, n: u32) -> Result<f64> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Domain(format!("q = {q} must lie in [0, 1)")));
    }
    let p = BetaBinParams::new(n, mu, kappa)?;
    Ok((1.0 - mu) * intensity_report(&p).elasticity / (1.0 - q))
}

/// P(Y = y | Y > 0) for y ≥ 1.
pub fn ztbb_log_pmf(p: &BetaBinParams, y: u32) -> Result<f64> {
    if y == 0 {
        return Err(Error::Domain("zero-truncated support starts at 1".into()));
    }
    Ok(log_pmf(p, y)? - log_positive_prob(p))
}

/// One draw from the zero-truncated beta-binomial by rejecting zeros.
///
/// Uses the default loop cap of [`DEFAULT_REJECTION_CAP`].
pub fn sample_ztbb<R: Rng + ?Sized>(p: &BetaBinParams, rng: &mut R) -> Result<u32> {
    sample_ztbb_with_cap(p, rng, DEFAULT_REJECTION_CAP)
}

/// One draw from the zero-truncated beta-binomial with an explicit loop cap.
pub fn sample_ztbb_with_cap<R: Rng + ?Sized>(p: &BetaBinParams, rng: &mut R, cap: usize) -> Result<u32> {
    if p.n == 1 {
        return Ok(1);
    }
    let p0 = zero_prob(p);
    if p0 >= MAX_SAMPLER_P0 {
        return Err(Error::Sampling(format!(
            "cell (n={}, mu={}, kappa={}) has p0 = {p0:.6} >= {MAX_SAMPLER_P0}",
            p.n, p.mu, p.kappa
        )));
    }
    let beta = Beta::new(p.a(), p.b()).map_err(|e| Error::Sampling(e.to_string()))?;
    for _ in 0..cap {
        let pr: f64 = beta.sample(rng);
        let y = Binomial::new(u64::from(p.n), pr.clamp(0.0, 1.0))
            .map_err(|e| Error::Sampling(e.to_string()))?
            .sample(rng);
        if y > 0 {
            return Ok(y as u32);
        }
    }
    Err(Error::Sampling(format!(
        "rejection cap {cap} exceeded for cell (n={}, mu={}, kappa={})",
        p.n, p.mu, p.kappa
    )))
}

/// One untruncated beta-binomial draw.
pub fn sample_bb<R: Rng + ?Sized>(p: &BetaBinParams, rng: &mut R) -> Result<u32> {
    let beta = Beta::new(p.a(), p.b()).map_err(|e| Error::Sampling(e.to_string()))?;
    let pr: f64 = beta.sample(rng);
    let y = Binomial::new(u64::from(p.n), pr.clamp(0.0, 1.0))
        .map_err(|e| Error::Sampling(e.to_string()))?
        .sample(rng);
    Ok(y as u32)
}

fn check_finite(p: &BetaBinParams) -> Result<()> {
    if !p.mu.is_finite() || !p.kappa.is_finite() || p.n == 0 {
        return Err(Error::Domain(format!("invalid cell (n={}, mu={}, kappa={})", p.n, p.mu, p.kappa)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bb(n: u32, mu: f64, kappa: f64) -> BetaBinParams {
        BetaBinParams::new(n, mu, kappa).unwrap()
    }

    /// Direct pmf oracle from gamma functions in extended arithmetic-free form.
    fn pmf_oracle(p: &BetaBinParams, y: u32) -> f64 {
        use crate::special::{ln_beta, ln_gamma};
        let n = f64::from(p.n);
        let yf = f64::from(y);
        (ln_gamma(n + 1.0) - ln_gamma(yf + 1.0) - ln_gamma(n - yf + 1.0) + ln_beta(yf + p.a(), n - yf + p.b())
            - ln_beta(p.a(), p.b()))
        .exp()
    }

    #[test]
    fn log_pmf_examples() {
        let p = bb(5, 0.3, 2.0);
        assert!((log_pmf(&p, 0).unwrap() - 0.376992f64.ln()).abs() < 2e-6);
        assert!((log_pmf(&bb(1, 0.3, 7.0), 0).unwrap() - 0.7f64.ln()).abs() < 1e-14);
        let binom = (120.0f64).ln() + 3.0 * 0.3f64.ln() + 7.0 * 0.7f64.ln();
        assert!((log_pmf(&bb(10, 0.3, 1e6), 3).unwrap() - binom).abs() < 1e-4);
        assert!(log_pmf(&p, 6).is_err());
        for y in 0..=5 {
            assert!((log_pmf(&p, y).unwrap().exp() - pmf_oracle(&p, y)).abs() < 1e-12);
        }
        let big = bb(1000, 0.4, 3.0);
        assert!(log_pmf(&big, 500).unwrap().is_finite());
    }

    #[test]
    fn zero_prob_examples() {
        assert!((zero_prob(&bb(5, 0.3, 2.0)) - 0.376992).abs() < 1e-6);
        assert!((zero_prob(&bb(1, 0.25, 13.0)) - 0.75).abs() < 1e-15);
        let p = bb(50, 0.3, 7.0);
        let direct: f64 = (0..50).map(|j| ((0.7 * 7.0 + j as f64) / (7.0 + j as f64)).ln()).sum();
        assert!((zero_prob(&p) - direct.exp()).abs() < 1e-12);
        assert!((zero_prob(&p) - log_pmf(&p, 0).unwrap().exp()).abs() < 1e-12);
    }

    #[test]
    fn moments_examples() {
        let (m, v) = moments(&bb(5, 0.3, 2.0));
        assert!((m - 1.5).abs() < 1e-14 && (v - 2.45).abs() < 1e-14);
        let (m, v) = moments(&bb(1, 0.3, 4.0));
        assert!((m - 0.3).abs() < 1e-15 && (v - 0.21).abs() < 1e-15);
        let p = bb(20, 0.4, 5.0);
        let pm: Vec<f64> = (0..=20).map(|y| pmf_oracle(&p, y)).collect();
        let em: f64 = pm.iter().enumerate().map(|(y, w)| y as f64 * w).sum();
        let ev: f64 = pm.iter().enumerate().map(|(y, w)| (y as f64 - em).powi(2) * w).sum();
        let (m, v) = moments(&p);
        assert!((m - em).abs() < 1e-11 && (v - ev).abs() < 1e-11);
    }

    #[test]
    fn factorial_moment_examples() {
        let p = bb(5, 0.3, 2.0);
        let f2 = factorial_moment(&p, 2);
        assert!((f2 - 3.2).abs() < 1e-12);
        assert!((f2 + 1.5 - 4.70).abs() < 1e-12);
        assert!((factorial_moment(&p, 1) - 1.5).abs() < 1e-13);
        assert_eq!(factorial_moment(&p, 6), 0.0);
        let p = bb(8, 0.55, 3.7);
        let want: f64 = (0..=8u32).map(|y| {
            let yf = f64::from(y);
            yf * (yf - 1.0) * (yf - 2.0) * pmf_oracle(&p, y)
        }).sum();
        assert!((factorial_moment(&p, 3) - want).abs() < 1e-10);
    }

    #[test]
    fn truncated_moments_examples() {
        let (m, v) = truncated_moments(&bb(5, 0.3, 2.0));
        // 1.5/0.623008 and the exact truncated variance.
        assert!((m - 2.407_673_737_736_915).abs() < 1e-12, "{m}");
        assert!((v - 1.747_151_550_854_287).abs() < 1e-12, "{v}");
        let (m, v) = truncated_moments(&bb(1, 0.3, 2.0));
        assert!((m - 1.0).abs() < 1e-14 && v.abs() < 1e-14);
        let p = bb(12, 0.2, 4.0);
        let pos = 1.0 - pmf_oracle(&p, 0);
        let m1: f64 = (1..=12u32).map(|y| f64::from(y) * pmf_oracle(&p, y)).sum::<f64>() / pos;
        let m2: f64 = (1..=12u32).map(|y| f64::from(y).powi(2) * pmf_oracle(&p, y)).sum::<f64>() / pos;
        let (m, v) = truncated_moments(&p);
        assert!((m - m1).abs() < 1e-11 && (v - (m2 - m1 * m1)).abs() < 1e-10);
    }

    #[test]
    fn intensity_examples() {
        let r = intensity_report(&bb(10, 0.3, 10.0));
        assert!((r.elasticity - 0.734979).abs() < 1e-6);
        assert!((r.elasticity + r.omega - 1.0).abs() < 1e-15);
        let h = |mu: f64| {
            let p = bb(10, mu, 10.0);
            mu / positive_prob(&p)
        };
        let fd = (h(0.3 + 1e-6) - h(0.3 - 1e-6)) / 2e-6;
        assert!((fd / r.dh_dmu - 1.0).abs() < 1e-6);
        let r1 = intensity_report(&bb(1, 0.5, 3.0));
        assert_eq!(r1.h, 1.0);
        assert_eq!(r1.elasticity, 0.0);
        assert_eq!(r1.dh_dmu, 0.0);
    }

    #[test]
    fn variance_decomposition_examples() {
        let d = variance_decomposition(&bb(100, 0.4, 1e6), 1.0).unwrap();
        assert!((d.od - 1.0).abs() < 1e-3);
        let p = bb(5, 0.3, 2.0);
        let q = 0.7;
        let pos = 1.0 - pmf_oracle(&p, 0);
        let probs: Vec<f64> = (0..=5u32)
            .map(|y| if y == 0 { 1.0 - q } else { q * pmf_oracle(&p, y) / pos })
            .collect();
        let m: f64 = probs.iter().enumerate().map(|(y, w)| y as f64 * w).sum();
        let v: f64 = probs.iter().enumerate().map(|(y, w)| (y as f64 - m).powi(2) * w).sum();
        let d = variance_decomposition(&p, q).unwrap();
        assert!((d.var_total - v).abs() < 1e-12);
        assert!((d.vr - v / m).abs() < 1e-12);
        let d = variance_decomposition(&bb(10, 0.4, 5.0), 0.6).unwrap();
        assert!((d.cv_uncond_sq - (d.cv_cond_sq + 0.4) / 0.6).abs() < 1e-14);
        assert!(variance_decomposition(&p, 0.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert!((dominance_threshold(0.64, 0.30, 7.0, 50).unwrap() - 1.87).abs() < 0.01);
        assert!((dominance_threshold(0.50, 0.45, 15.0, 50).unwrap() - 1.10).abs() < 0.01);
        assert_eq!(dominance_threshold(0.5, 0.5, 3.0, 1).unwrap(), 0.0);
        assert!(dominance_threshold(1.0, 0.5, 3.0, 10).is_err());
    }

    #[test]
    fn sampler_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(sample_ztbb(&bb(1, 0.2, 3.0), &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_ztbb(&bb(5, 1e-6, 2.0), &mut rng), Err(Error::Sampling(_))));
        let p = bb(20, 0.1, 1.0);
        let draws = 100_000;
        let mut counts = vec![0usize; 21];
        for _ in 0..draws {
            counts[sample_ztbb(&p, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        let stat = chi2_stat(&p, &counts, draws);
        assert!(crate::special::chi2_sf(stat.0, stat.1) > 0.001, "chi2 = {stat:?}");
    }

    /// Pearson statistic with tail bins pooled to expected count ≥ 5.
    fn chi2_stat(p: &BetaBinParams, counts: &[usize], total: usize) -> (f64, f64) {
        let mut stat = 0.0;
        let mut bins = 0.0;
        let (mut oe, mut ee) = (0.0, 0.0);
        for y in 1..=p.n {
            oe += counts[y as usize] as f64;
            ee += ztbb_log_pmf(p, y).unwrap().exp() * total as f64;
            if ee >= 5.0 {
                stat += (oe - ee).powi(2) / ee;
                bins += 1.0;
                oe = 0.0;
                ee = 0.0;
            }
        }
        if ee > 0.0 {
            stat += (oe - ee).powi(2) / ee;
            bins += 1.0;
        }
        (stat, bins - 1.0)
    }

    #[test]
    fn clamp_policy() {
        let (p, ev) = BetaBinParams::clamped(3, 1.0, 1e9);
        assert!(ev.mu && ev.kappa);
        assert_eq!(p.mu, MU_CLAMP.1);
        assert_eq!(p.kappa, KAPPA_CLAMP.1);
        assert!(BetaBinParams::new(3, 0.0, 1.0).is_err());
        assert!(BetaBinParams::new(0, 0.5, 1.0).is_err());
        assert!(BetaBinParams::new(3, 0.5, f64::NAN).is_err());
    }
}
