//! Special functions on the positive real line.
//!
//! Digamma and trigamma shift the argument above [`SHIFT`] with the
//! recurrences ψ(x) = ψ(x+1) − 1/x and ψ₁(x) = ψ₁(x+1) + 1/x², then apply the
//! asymptotic series in 1/x². Log-gamma comes from `statrs`.

/// Arguments are shifted to at least this value before the asymptotic series.
pub const SHIFT: f64 = 10.0;

/// Rising-factorial length up to which finite sums replace gamma differences.
const DIRECT_SUM_MAX: u32 = 64;

/// B_{2k}/(2k) for k = 1..8.
const DIGAMMA_ASYMP: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// B_{2k} for k = 1..8.
const TRIGAMMA_ASYMP: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

/// Digamma function ψ(x) for x > 0. Returns NaN for x ≤ 0 or NaN input.
///
/// ```
/// let euler = 0.577_215_664_901_532_9_f64;
/// assert!((hbb::special::digamma(1.0) + euler).abs() < 1e-14);
/// ```
pub fn digamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return if x == f64::INFINITY { f64::INFINITY } else { f64::NAN };
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_ASYMP {
        series += c * pow;
        pow *= inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// Trigamma function ψ₁(x) for x > 0. Returns NaN for x ≤ 0 or NaN input.
///
/// ```
/// let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
/// assert!((hbb::special::trigamma(1.0) - pi2_6).abs() < 1e-14);
/// ```
pub fn trigamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return if x == f64::INFINITY { 0.0 } else { f64::NAN };
    }
    let mut acc = 0.0;
    let mut x = x;
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv * inv2;
    for c in TRIGAMMA_ASYMP {
        series += c * pow;
        pow *= inv2;
    }
    acc + inv + 0.5 * inv2 + series
}

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Natural log of the beta function B(a, b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// log C(n, k) for 0 ≤ k ≤ n.
pub fn ln_choose(n: u32, k: u32) -> f64 {
    debug_assert!(k <= n);
    let k = k.min(n - k);
    if n <= 20 {
        let mut c = 1.0_f64;
        for j in 0..k {
            c = c * f64::from(n - j) / f64::from(j + 1);
        }
        c.round().ln()
    } else {
        ln_gamma(f64::from(n) + 1.0) - ln_gamma(f64::from(k) + 1.0) - ln_gamma(f64::from(n - k) + 1.0)
    }
}

/// log of the rising factorial x^(k) = x(x+1)…(x+k−1) = Γ(x+k)/Γ(x).
pub fn ln_rising(x: f64, k: u32) -> f64 {
    if k <= DIRECT_SUM_MAX {
        (0..k).map(|j| (x + f64::from(j)).ln()).sum()
    } else {
        ln_gamma(x + f64::from(k)) - ln_gamma(x)
    }
}

/// ψ(x+k) − ψ(x) = Σ_{j<k} 1/(x+j).
pub fn digamma_diff(x: f64, k: u32) -> f64 {
    if k <= DIRECT_SUM_MAX {
        (0..k).map(|j| 1.0 / (x + f64::from(j))).sum()
    } else {
        digamma(x + f64::from(k)) - digamma(x)
    }
}

/// ψ₁(x) − ψ₁(x+k) = Σ_{j<k} 1/(x+j)².
pub fn trigamma_diff(x: f64, k: u32) -> f64 {
    if k <= DIRECT_SUM_MAX {
        (0..k)
            .map(|j| {
                let t = x + f64::from(j);
                1.0 / (t * t)
            })
            .sum()
    } else {
        trigamma(x) - trigamma(x + f64::from(k))
    }
}

/// Logistic function 1/(1+e^{−x}).
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// log(1 − e^x) for x < 0.
pub fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Standard normal cumulative distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// Upper tail of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(0.5 * df, 0.5 * x)
}

/// Neumaier-compensated sum in iteration order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    /// Adds one term.
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    /// Current compensated total.
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    const EULER: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0) + EULER).abs() < 1e-15);
        assert!((digamma(0.5) + EULER + 2.0 * LN_2).abs() < 1e-14);
        // ψ(1e-3) = −1000.5755719318103
        assert!((digamma(1e-3) / -1_000.575_571_931_810_3 - 1.0).abs() < 1e-13);
        // ψ(1e6) ≈ ln(1e6) − 5e-7 − 1/(12e12)
        let want = 1e6_f64.ln() - 5e-7 - 1.0 / 12e12;
        assert!((digamma(1e6) / want - 1.0).abs() < 1e-15);
        assert!(digamma(0.0).is_nan());
        assert!(digamma(-1.5).is_nan());
    }

    #[test]
    fn trigamma_reference_values() {
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-14);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-13);
        // ψ₁(1e-3) = 1000001.6425331958
        assert!((trigamma(1e-3) / 1_000_001.642_533_195_8 - 1.0).abs() < 1e-13);
        assert!(trigamma(0.0).is_nan());
    }

    #[test]
    fn digamma_matches_lgamma_difference() {
        for &x in &[0.01f64, 0.3, 1.7, 4.2, 9.9, 10.1, 55.0, 1234.5] {
            let h = 1e-5 * x.max(1.0);
            let fd = (ln_gamma(x + h) - ln_gamma(x - h)) / (2.0 * h);
            assert!((fd - digamma(x)).abs() < 1e-6 * digamma(x).abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn trigamma_matches_digamma_difference() {
        for &x in &[0.05f64, 0.7, 2.5, 9.0, 11.0, 300.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd / trigamma(x) - 1.0).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn rising_and_diffs_agree_across_switch() {
        for &x in &[0.2, 3.5, 40.0] {
            for &k in &[1u32, 10, 64, 65, 200] {
                let direct: f64 = (0..k).map(|j| (x + f64::from(j)).ln()).sum();
                assert!((ln_rising(x, k) - direct).abs() < 1e-10 * direct.abs().max(1.0));
                let d: f64 = (0..k).map(|j| 1.0 / (x + f64::from(j))).sum();
                assert!((digamma_diff(x, k) - d).abs() < 1e-12 * d);
                let t: f64 = (0..k).map(|j| (x + f64::from(j)).powi(-2)).sum();
                assert!((trigamma_diff(x, k) - t).abs() < 1e-12 * t.max(1.0));
            }
        }
    }

    #[test]
    fn choose_small_and_large() {
        assert_eq!(ln_choose(5, 2), 10f64.ln());
        assert!((ln_choose(100, 50) - 66.783_841_652_017_43).abs() < 1e-10);
    }

    #[test]
    fn normal_helpers() {
        let c = norm_cdf(1.959_963_984_540_054);
        assert!((c - 0.975).abs() < 1e-11, "{c}");
        assert!((norm_quantile(0.95) - 1.644_853_626_951_472_2).abs() < 1e-12);
        assert!((chi2_sf(3.841_458_820_694_124, 1.0) - 0.05).abs() < 1e-10);
    }

    #[test]
    fn log_helpers() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((expit(0.0) - 0.5).abs() < 1e-16);
        assert!((ln_one_minus_exp(-1e-10) - (1e-10f64).ln()).abs() < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn digamma_recurrence(x in 1e-3f64..1e4) {
            let lhs = digamma(x + 1.0);
            let rhs = digamma(x) + 1.0 / x;
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0 / x));
        }

        #[test]
        fn trigamma_recurrence(x in 1e-3f64..1e4) {
            let lhs = trigamma(x);
            let rhs = trigamma(x + 1.0) + 1.0 / (x * x);
            proptest::prop_assert!((lhs / rhs - 1.0).abs() <= 1e-12);
        }
    }
}
