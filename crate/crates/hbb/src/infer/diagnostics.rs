//! Rank-normalized split R-hat and effective sample sizes.
//!
//! Chains are split in half, pooled draws are replaced by normal scores of
//! their ranks, and R-hat is the larger of the bulk and folded values.
//! Autocorrelations are summed in pairs until the first negative pair, with
//! the pair sums forced to be non-increasing.

use crate::special::norm_quantile;

fn check(chains: &[Vec<f64>]) -> Option<usize> {
    if chains.len() < 2 {
        return None;
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return None;
    }
    Some(n)
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Replaces pooled draws by Φ⁻¹((rank − 3/8)/(S + 1/4)), ties sharing the average rank.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (ci, c) in chains.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            all.push((v, ci, i));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = norm_quantile((rank - 0.375) / (s + 0.25));
        for e in &all[i..=j] {
            out[e.1][e.2] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let b = n * var(&means);
    if w == 0.0 {
        return if b == 0.0 { f64::NAN } else { f64::INFINITY };
    }
    let vplus = (n - 1.0) / n * w + b / n;
    (vplus / w).sqrt()
}

/// Rank-normalized split R-hat (maximum of bulk and folded).
///
/// Returns NaN when every draw is identical and +∞ when chains are
/// internally constant but disagree. Returns NaN with fewer than 2 chains
/// or 4 draws per chain.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if check(chains).is_none() {
        return f64::NAN;
    }
    let sp = split(chains);
    let bulk = rhat_basic(&rank_normalize(&sp));
    let all: Vec<f64> = sp.iter().flatten().copied().collect();
    let med = crate::model::quantile(&all, 0.5);
    let folded: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    if bulk.is_nan() {
        return if tail.is_nan() { f64::NAN } else { tail };
    }
    if tail.is_nan() {
        return bulk;
    }
    bulk.max(tail)
}

fn autocov(c: &[f64], lag: usize) -> f64 {
    let m = mean(c);
    let n = c.len();
    (0..n - lag).map(|i| (c[i] - m) * (c[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size of already-transformed chains.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let w = mean(&chains.iter().map(|c| var(c)).collect::<Vec<_>>());
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = var(&means);
    let vplus = (nf - 1.0) / nf * w + b_over_n;
    if !(vplus > 0.0) {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let ac: f64 = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / m;
        1.0 - (w - ac) / vplus
    };
    let mut rhos = vec![1.0, rho(1)];
    let mut t = 1;
    let mut last_pair = f64::INFINITY;
    let mut sum_pairs = 0.0;
    // Pairs (ρ_{2k}, ρ_{2k+1}).
    loop {
        let even = rhos[t - 1];
        let odd = rhos[t];
        let mut pair = even + odd;
        if pair < 0.0 {
            break;
        }
        if pair > last_pair {
            pair = last_pair;
        }
        last_pair = pair;
        sum_pairs += pair;
        t += 2;
        if t >= n - 1 {
            break;
        }
        rhos.push(rho(t - 1));
        rhos.push(rho(t));
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / (m * nf).log10());
    m * nf / tau
}

/// Bulk effective sample size on rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    if check(chains).is_none() {
        return f64::NAN;
    }
    ess_raw(&rank_normalize(&split(chains)))
}

/// Tail effective sample size: the smaller ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    if check(chains).is_none() {
        return f64::NAN;
    }
    let sp = split(chains);
    let all: Vec<f64> = sp.iter().flatten().copied().collect();
    let mut out = f64::INFINITY;
    for p in [0.05, 0.95] {
        let qv = crate::model::quantile(&all, p);
        let ind: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|&v| f64::from(u8::from(v <= qv))).collect()).collect();
        out = out.min(ess_raw(&ind));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
    }

    #[test]
    fn null_rhat_near_one() {
        let r = split_rhat(&iid(4, 2000, 1));
        assert!((0.999..1.01).contains(&r), "{r}");
        let e = ess_bulk(&iid(4, 2000, 2));
        assert!(e > 6000.0, "{e}");
        assert!(ess_tail(&iid(4, 2000, 3)) > 4000.0);
    }

    #[test]
    fn disagreeing_chains() {
        let c = vec![vec![0.0; 100], vec![1.0; 100]];
        assert!(split_rhat(&c) > 1.01);
        assert!(split_rhat(&[vec![3.0; 50], vec![3.0; 50]]).is_nan());
        assert!(split_rhat(&[vec![0.0; 50]]).is_nan());
    }

    #[test]
    fn ar1_ess() {
        let rho: f64 = 0.9;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (m, n) = (4, 5000);
        let chains: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let mut x: f64 = StandardNormal.sample(&mut rng);
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = rho * x + (1.0 - rho * rho).sqrt() * e;
                        x
                    })
                    .collect()
            })
            .collect();
        let want = (m * n) as f64 * (1.0 - rho) / (1.0 + rho);
        let got = ess_bulk(&chains);
        assert!((got / want - 1.0).abs() < 0.2, "{got} vs {want}");
    }
}
