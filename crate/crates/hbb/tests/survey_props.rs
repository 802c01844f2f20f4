use hbb::bbkernel::{self, BetaBinParams};
use hbb::model::{ModelStructure, Observation, ParamVector, Variant};
use hbb::scores;
use hbb::special::expit;
use hbb::survey::{self, CalibrationTransform, Margin, SingletonPolicy, SurveyDesign};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn design(strata: Vec<usize>, psus: Vec<usize>, w: Vec<f64>) -> SurveyDesign {
    let obs: Vec<Observation> = strata
        .iter()
        .zip(&psus)
        .zip(&w)
        .map(|((&h, &c), &w)| Observation { y: 1, n: 2, x: vec![1.0], state: 0, stratum: h, psu: c, w_raw: w })
        .collect();
    SurveyDesign::from_observations(&obs).unwrap()
}

fn spd(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(k, k) * 0.5
}

proptest! {
    #[test]
    fn meat_is_psd(seed in any::<u64>(), n in 12usize..120, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strata: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let psus: Vec<usize> = (0..n).map(|i| i % 9).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
        let d = design(strata, psus, w);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let j = survey::meat_cluster_rows(&rows, &d.weights_norm, &d, SingletonPolicy::Error).unwrap();
        let norm = j.abs().max().max(1e-300);
        let ev = j.symmetric_eigenvalues();
        prop_assert!(ev.min() >= -1e-10 * norm, "{}", ev.min());
    }

    #[test]
    fn der_is_invariant_to_rescaling(seed in any::<u64>(), k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spd(k, &mut rng);
        let j = spd(k, &mut rng);
        let v = survey::sandwich(&h, &j).unwrap();
        let (der, _) = survey::der(&v, &h).unwrap();
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(k, |_, _| rng.random_range(0.1..10.0)));
        let si = s.clone().try_inverse().unwrap();
        // θ' = Sθ: H' = S⁻¹HS⁻¹, J' = S⁻¹JS⁻¹.
        let v2 = survey::sandwich(&(&si * &h * &si), &(&si * &j * &si)).unwrap();
        let (der2, _) = survey::der(&v2, &(&si * &h * &si)).unwrap();
        for (a, b) in der.iter().zip(&der2) {
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
        prop_assert!(((&v - v.transpose()).abs().max()) < 1e-12 * v.abs().max());
    }

    #[test]
    fn kish_bounds_and_scale_invariance(seed in any::<u64>(), n in 2usize..300, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..20.0)).collect();
        let (deff, ess) = survey::kish(&w).unwrap();
        prop_assert!(deff >= 1.0 - 1e-12 && ess <= n as f64 + 1e-9);
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let (d2, _) = survey::kish(&scaled).unwrap();
        prop_assert!((deff - d2).abs() < 1e-9);
        let norm = survey::normalize_weights(&w).unwrap();
        prop_assert!((norm.iter().sum::<f64>() - n as f64).abs() < 1e-9 * n as f64);
    }

    #[test]
    fn calibration_is_transform_invariant(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<Vec<f64>> = (0..400).map(|_| (0..k + 1).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect()).collect();
        let v = spd(k, &mut rng) * 0.05;
        let theta: Vec<f64> = vec![0.0; k + 1];
        let block: Vec<usize> = (0..k).collect();
        let a = survey::cholesky_calibrate(&draws, &theta, &v, &block, CalibrationTransform::Cholesky).unwrap();
        let b = survey::cholesky_calibrate(&draws, &theta, &v, &block, CalibrationTransform::SymmetricRoot).unwrap();
        let sd = |d: &[Vec<f64>], j: usize| {
            let m = d.iter().map(|r| r[j]).sum::<f64>() / d.len() as f64;
            (d.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
        };
        for j in 0..k {
            prop_assert!((sd(&a, j) - sd(&b, j)).abs() < 1e-10);
            prop_assert!((sd(&a, j) - v[(j, j)].sqrt()).abs() < 1e-10);
        }
        for (ra, rd) in a.iter().zip(&draws) {
            prop_assert_eq!(ra[k], rd[k]);
        }
    }
}

fn simulate(theta: &ParamVector, xs: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Observation> {
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            let ee: f64 = theta.alpha.iter().zip(x).map(|(a, v)| a * v).sum();
            let ei: f64 = theta.beta.iter().zip(x).map(|(a, v)| a * v).sum();
            let n = 10 + (i % 30) as u32;
            let y = if rng.random_bool(expit(ee)) {
                bbkernel::sample_ztbb(&BetaBinParams::new(n, expit(ei), theta.log_kappa.exp()).unwrap(), rng).unwrap()
            } else {
                0
            };
            Observation { y, n, x: x.clone(), state: 0, stratum: 0, psu: i, w_raw: 1.0 }
        })
        .collect()
}

#[test]
fn equal_weight_information_and_sandwich_identities() {
    let ms = ModelStructure::new(Variant::M0, 2, 1, None).unwrap();
    let mut th = ParamVector::zeros(&ms);
    th.alpha = vec![0.4, -0.6];
    th.beta = vec![-0.9, 0.3];
    th.log_kappa = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 300;
    let xs: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, -1.5 + 3.0 * i as f64 / n as f64]).collect();
    let reps = 400;
    let f = 2 * ms.p + 1;
    let (mut ss, mut ss2) = (DMatrix::<f64>::zeros(f, f), DMatrix::<f64>::zeros(f, f));
    let (mut vs, mut vs2) = (DMatrix::<f64>::zeros(f, f), DMatrix::<f64>::zeros(f, f));
    let mut hinv_mean = DMatrix::<f64>::zeros(f, f);
    let mut h_ext = DMatrix::<f64>::zeros(ms.p, ms.p);
    for _ in 0..reps {
        let data = simulate(&th, &xs, &mut rng);
        let sm = scores::score_matrix(&th, &data, &ms, false).unwrap();
        let h = scores::hessian(&th, &data, None, &ms, false).unwrap();
        let mut outer = DMatrix::zeros(f, f);
        for row in &sm.rows {
            let r = nalgebra::DVector::from_column_slice(row);
            outer += &r * r.transpose();
        }
        ss += &outer;
        ss2 += outer.component_mul(&outer);
        h_ext += h.matrix.view((0, 0), (ms.p, ms.p));
        let d = SurveyDesign::from_observations(&data).unwrap();
        let j = survey::meat_cluster(&sm, &d, SingletonPolicy::Error).unwrap();
        let v = survey::sandwich(&h.matrix, &j).unwrap();
        vs += &v;
        vs2 += v.component_mul(&v);
        hinv_mean += h.matrix.clone().try_inverse().unwrap();
    }
    let r = reps as f64;
    h_ext /= r;
    hinv_mean /= r;
    for a in 0..ms.p {
        for b in 0..ms.p {
            let m = ss[(a, b)] / r;
            let se = ((ss2[(a, b)] / r - m * m) / r).sqrt();
            assert!((m - h_ext[(a, b)]).abs() < 3.0 * se, "info ({a},{b}): {m} vs {} (se {se})", h_ext[(a, b)]);
        }
    }
    for a in 0..f {
        for b in 0..f {
            let m = vs[(a, b)] / r;
            let se = ((vs2[(a, b)] / r - m * m) / r).sqrt();
            // First-order identity: allow a small second-order gap on the correlation scale.
            let scale = (hinv_mean[(a, a)] * hinv_mean[(b, b)]).sqrt();
            assert!((m - hinv_mean[(a, b)]).abs() < 3.0 * se + 0.05 * scale, "V ({a},{b}): {m} vs {} (se {se}, scale {scale})", hinv_mean[(a, b)]);
        }
    }
}

fn pfeffermann_sample(rng: &mut ChaCha8Rng, informative: bool) -> Vec<Observation> {
    (0..600)
        .map(|i| {
            let x = rng.random_range(-1.5..1.5);
            let z = rng.random_bool(expit(0.3 + 0.6 * x));
            let n = 20;
            let y = if z { rng.random_range(1..=n) } else { 0 };
            let lw = 0.5 * rng.sample::<f64, _>(StandardNormal) + if informative && z { -0.8 } else { 0.0 };
            Observation { y, n, x: vec![1.0, x], state: 0, stratum: i % 10, psu: i, w_raw: lw.exp() }
        })
        .collect()
}

#[test]
fn pfeffermann_size_and_power() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut null_rej, mut alt_rej) = (0, 0);
    for _ in 0..100 {
        let null = survey::pfeffermann_test(&pfeffermann_sample(&mut rng, false), Margin::Ext, &[0, 1]).unwrap();
        let alt = survey::pfeffermann_test(&pfeffermann_sample(&mut rng, true), Margin::Ext, &[0, 1]).unwrap();
        null_rej += usize::from(null.p_value < 0.05);
        alt_rej += usize::from(alt.p_value < 0.05);
    }
    // Binomial(100, 0.05) exceeds 12 with probability below 0.002.
    assert!(null_rej <= 12, "size: {null_rej} of 100");
    assert!(alt_rej >= 80, "power: {alt_rej} of 100");
}

#[test]
fn uniform_weights_give_null_diagnostics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut data = pfeffermann_sample(&mut rng, false);
    for o in &mut data {
        o.w_raw = 2.5;
    }
    let (deff, _) = survey::kish(&data.iter().map(|o| o.w_raw).collect::<Vec<_>>()).unwrap();
    assert!((deff - 1.0).abs() < 1e-12);
    let (delta, flag) = survey::bvm_weight_diagnostic(&vec![2.5; data.len()], data.len()).unwrap();
    assert!(delta.abs() < 1e-12 && !flag);
    for m in [Margin::Ext, Margin::Int] {
        for row in survey::hausman_margin(&data, m, &[0, 1], SingletonPolicy::Collapse).unwrap() {
            assert!(row.z.unwrap().abs() < 1e-6, "{row:?}");
        }
    }
}
