//! Cholesky factors of correlation matrices and the LKJ density.
//!
//! Free coordinates y_ik (row i, column k < i, row-major) map to canonical
//! partial correlations z_ik = tanh(y_ik). Row i of the factor is
//! L_ik = z_ik r_k and L_ii = r_i with r_k = ∏_{j<k} √(1 − z_ij²), so every
//! row has unit norm. The density of y under LKJ(η) combined with the
//! change-of-variables terms is Σ c_k log(1 − z_ik²) − log c_K(η) with
//! c_k = (K − k + 2η − 2)/2.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::special::ln_beta;

/// Number of free coordinates of a K×K correlation Cholesky factor.
pub fn n_free(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Builds the unit-row lower-triangular factor from free coordinates.
pub fn chol_from_free(free: &[f64], k: usize) -> DMatrix<f64> {
    debug_assert_eq!(free.len(), n_free(k));
    let mut l = DMatrix::zeros(k, k);
    let mut idx = 0;
    for i in 0..k {
        let mut rem = 1.0_f64;
        for c in 0..i {
            let z = free[idx].tanh();
            idx += 1;
            l[(i, c)] = z * rem.sqrt();
            rem *= 1.0 - z * z;
        }
        l[(i, i)] = rem.sqrt();
    }
    l
}

/// Recovers free coordinates from a unit-row lower-triangular factor.
pub fn free_from_chol(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_corr_chol(l, 1e-8)?;
    let k = l.nrows();
    let mut out = Vec::with_capacity(n_free(k));
    for i in 0..k {
        let mut rem = 1.0_f64;
        for c in 0..i {
            let z = if rem > 0.0 { l[(i, c)] / rem.sqrt() } else { 0.0 };
            let z = z.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            out.push(z.atanh());
            rem *= 1.0 - z * z;
        }
    }
    Ok(out)
}

/// Checks lower-triangularity, positive diagonal and unit row norms.
pub fn check_corr_chol(l: &DMatrix<f64>, tol: f64) -> Result<()> {
    let k = l.nrows();
    if l.ncols() != k {
        return Err(Error::Structure("correlation factor must be square".into()));
    }
    for i in 0..k {
        let mut norm = 0.0;
        for c in 0..k {
            let v = l[(i, c)];
            if c > i && v != 0.0 {
                return Err(Error::Structure(format!("entry ({i},{c}) above the diagonal is nonzero")));
            }
            norm += v * v;
        }
        if l[(i, i)] <= 0.0 || (norm - 1.0).abs() > tol {
            return Err(Error::Domain(format!("row {i} of the correlation factor is not a unit vector")));
        }
    }
    Ok(())
}

/// log c_K(η), the normalizing constant of LKJ(η) over K×K correlation matrices.
pub fn log_normalizer(k: usize, eta: f64) -> f64 {
    let kf = k as f64;
    let mut out = 0.0;
    for i in 1..k {
        let m = (k - i) as f64;
        out += (2.0 * eta - 2.0 + kf - i as f64) * m * std::f64::consts::LN_2;
        let arg = eta + (kf - i as f64 - 1.0) / 2.0;
        out += m * ln_beta(arg, arg);
    }
    out
}

/// Log density of a correlation matrix R under LKJ(η): (η−1) log det R − log c_K(η).
pub fn log_density_corr(r: &DMatrix<f64>, eta: f64) -> Result<f64> {
    let k = r.nrows();
    let chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("correlation matrix is not positive definite".into()))?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((eta - 1.0) * log_det - log_normalizer(k, eta))
}

/// Log density of the free coordinates: LKJ(η) on the factor plus the Jacobian.
pub fn log_density_free(free: &[f64], k: usize, eta: f64) -> f64 {
    let mut out = -log_normalizer(k, eta);
    let mut idx = 0;
    for i in 0..k {
        for c in 0..i {
            let z = free[idx].tanh();
            idx += 1;
            out += coef(k, c, eta) * (1.0 - z * z).ln();
        }
    }
    out
}

/// Gradient of [`log_density_free`] with respect to the free coordinates.
pub fn grad_log_density_free(free: &[f64], k: usize, eta: f64, out: &mut [f64]) {
    let mut idx = 0;
    for i in 0..k {
        for c in 0..i {
            out[idx] += -2.0 * coef(k, c, eta) * free[idx].tanh();
            idx += 1;
        }
    }
}

fn coef(k: usize, c: usize, eta: f64) -> f64 {
    0.5 * ((k - c) as f64 + 2.0 * eta - 2.0)
}

/// Chains a gradient with respect to the factor entries back to the free coordinates.
///
/// `g` holds ∂f/∂L for the lower triangle including the diagonal.
pub fn chain_to_free(free: &[f64], k: usize, g: &DMatrix<f64>, out: &mut [f64]) {
    let l = chol_from_free(free, k);
    let mut idx = 0;
    for i in 0..k {
        let base = idx;
        // Suffix sums S_m = Σ_{j=m+1}^{i} G_ij L_ij.
        let mut suffix = vec![0.0; i + 1];
        let mut acc = g[(i, i)] * l[(i, i)];
        for m in (0..i).rev() {
            suffix[m] = acc;
            acc += g[(i, m)] * l[(i, m)];
        }
        let mut r = 1.0_f64;
        for m in 0..i {
            let z = free[base + m].tanh();
            let one_m = 1.0 - z * z;
            let d_dz = g[(i, m)] * r.sqrt() - z / one_m * suffix[m];
            out[base + m] += d_dz * one_m;
            r *= one_m;
        }
        idx += i;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_rows_are_unit() {
        let free = [0.3, -1.2, 0.8, 2.0, -0.4, 0.1];
        let l = chol_from_free(&free, 4);
        check_corr_chol(&l, 1e-12).unwrap();
        let back = free_from_chol(&l).unwrap();
        for (a, b) in free.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn normalizer_known_volumes() {
        // Volume of 3×3 correlation matrices is π²/2.
        let v = log_normalizer(3, 1.0).exp();
        assert!((v - std::f64::consts::PI.powi(2) / 2.0).abs() < 1e-12);
        // K = 2: ∫ (1−ρ²)^{η−1} dρ = 2^{2η−1} B(η, η).
        assert!((log_normalizer(2, 1.0).exp() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lkj2_density_matches_quadrature() {
        let eta = 2.0;
        let m = 200_000;
        let h = 2.0 / m as f64;
        let total: f64 = (0..m).map(|i| {
            let rho = -1.0 + (i as f64 + 0.5) * h;
            (1.0 - rho * rho).powf(eta - 1.0) * h
        }).sum();
        let rho: f64 = 0.5;
        let want = ((1.0 - rho * rho).powf(eta - 1.0) / total).ln();
        let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        assert!((log_density_corr(&r, eta).unwrap() - want).abs() < 1e-9);
        let r0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let r1 = DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 1.0]);
        let a = log_density_corr(&r0, 1.0).unwrap();
        let b = log_density_corr(&r1, 1.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn free_density_integrates_to_one() {
        // K = 2, η = 2 on a fine grid in y.
        let (lo, hi, m) = (-12.0, 12.0, 40_000);
        let h = (hi - lo) / m as f64;
        let tot: f64 = (0..m).map(|i| log_density_free(&[lo + (i as f64 + 0.5) * h], 2, 2.0).exp() * h).sum();
        assert!((tot - 1.0).abs() < 1e-8);
        // K = 3, η = 1.5 on a product grid.
        let (lo, hi, m) = (-8.0, 8.0, 120);
        let h = (hi - lo) / m as f64;
        let mut tot = 0.0;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let y = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h, lo + (k as f64 + 0.5) * h];
                    tot += log_density_free(&y, 3, 1.5).exp();
                }
            }
        }
        assert!((tot * h * h * h - 1.0).abs() < 1e-4, "{tot}");
    }

    #[test]
    fn free_density_matches_corr_density_plus_jacobian() {
        // For K = 2: log p(y) = log p(ρ) + log |dρ/dy|.
        for &y in &[-1.3, 0.0, 0.4, 2.1] {
            let rho: f64 = f64::tanh(y);
            let r = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let want = log_density_corr(&r, 2.0).unwrap() + (1.0 - rho * rho).ln();
            assert!((log_density_free(&[y], 2, 2.0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let free = vec![0.3, -0.7, 0.5, 1.1, -0.2, 0.05];
        let k = 4;
        let mut g = vec![0.0; 6];
        grad_log_density_free(&free, k, 2.0, &mut g);
        for p in 0..6 {
            let mut up = free.clone();
            let mut dn = free.clone();
            up[p] += 1e-6;
            dn[p] -= 1e-6;
            let fd = (log_density_free(&up, k, 2.0) - log_density_free(&dn, k, 2.0)) / 2e-6;
            assert!((fd - g[p]).abs() < 1e-7);
        }
        // Chain rule through the factor for f(L) = Σ W_ij L_ij.
        let w = DMatrix::from_fn(k, k, |i, j| if j <= i { 0.3 * i as f64 - 0.7 * j as f64 + 0.1 } else { 0.0 });
        let f = |fr: &[f64]| chol_from_free(fr, k).component_mul(&w).sum();
        let mut g = vec![0.0; 6];
        chain_to_free(&free, k, &w, &mut g);
        for p in 0..6 {
            let mut up = free.clone();
            let mut dn = free.clone();
            up[p] += 1e-6;
            dn[p] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - g[p]).abs() < 1e-8, "p={p}: {fd} vs {}", g[p]);
        }
    }
}
