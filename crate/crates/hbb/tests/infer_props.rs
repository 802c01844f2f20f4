use hbb::bbkernel::{self, BetaBinParams};
use hbb::infer::{self, lbfgs, HmcConfig, MapOptions, McmcConfig};
use hbb::model::{ModelStructure, Observation, ParamVector, Variant};
use hbb::scores;
use hbb::special::expit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn simulate(ms: &ModelStructure, th: &ParamVector, n_obs: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deltas = th.state_deviations(ms);
    (0..n_obs)
        .map(|i| {
            let mut x = vec![1.0];
            x.extend((1..ms.p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let state = i % ms.s;
            let d: &[f64] = if ms.q > 0 { &deltas[state] } else { &[] };
            let obs = Observation { y: 0, n: 5 + (i % 40) as u32, x, state, stratum: 0, psu: i, w_raw: 1.0 };
            let (ee, ei) = hbb::model::predictors_at(&th.alpha, &th.beta, d, &obs, ms.q);
            let y = if rng.random_bool(expit(ee)) {
                bbkernel::sample_ztbb(&BetaBinParams::new(obs.n, expit(ei), th.log_kappa.exp()).unwrap(), &mut rng).unwrap()
            } else {
                0
            };
            Observation { y, ..obs }
        })
        .collect()
}

fn m0_truth() -> (ModelStructure, ParamVector) {
    let ms = ModelStructure::new(Variant::M0, 3, 1, None).unwrap();
    let mut th = ParamVector::zeros(&ms);
    th.alpha = vec![0.5, -0.3, 0.2];
    th.beta = vec![-0.8, 0.1, -0.2];
    th.log_kappa = 2.0;
    (ms, th)
}

fn small_mcmc(seed: u64) -> McmcConfig {
    McmcConfig { chains: 2, hmc: HmcConfig { warmup: 300, samples: 300, ..HmcConfig::default() }, seed, ..McmcConfig::default() }
}

#[test]
fn line_search_never_worsens_objective() {
    let (ms, th) = m0_truth();
    let data = simulate(&ms, &th, 400, 1);
    let x0 = vec![0.0; ms.layout().dim];
    let r = lbfgs::minimize(
        |x| {
            let (f, g) = scores::log_posterior_grad(x, &data, None, &ms);
            (-f, g.iter().map(|v| -v).collect())
        },
        &x0,
        &lbfgs::LbfgsOptions::default(),
    );
    assert!(r.converged);
    assert!(r.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.history);
}

#[test]
fn fits_are_reproducible() {
    let (ms, th) = m0_truth();
    let data = simulate(&ms, &th, 300, 2);
    let a = infer::fit_map(&data, None, &ms, None, &MapOptions::default()).unwrap();
    let b = infer::fit_map(&data, None, &ms, None, &MapOptions::default()).unwrap();
    assert_eq!(a.flat_hat, b.flat_hat);
    assert_eq!(infer::laplace_draws(&a, 50, 9).unwrap(), infer::laplace_draws(&b, 50, 9).unwrap());
    let cfg = McmcConfig { chains: 2, hmc: HmcConfig { warmup: 50, samples: 50, ..HmcConfig::default() }, seed: 4, ..McmcConfig::default() };
    let m1 = infer::sample_mcmc(&data, None, &ms, None, &cfg).unwrap();
    let m2 = infer::sample_mcmc(&data, None, &ms, None, &cfg).unwrap();
    assert_eq!(m1.draws, m2.draws);
}

#[test]
fn laplace_and_hmc_agree_for_fixed_effects() {
    let (ms, th) = m0_truth();
    let data = simulate(&ms, &th, 2000, 3);
    let map = infer::fit_map(&data, None, &ms, None, &MapOptions::default()).unwrap();
    let lap = infer::laplace_draws(&map, 2000, 5).unwrap();
    let mc = infer::sample_mcmc(&data, None, &ms, None, &small_mcmc(6)).unwrap();
    for j in 0..ms.layout().dim {
        let col = |d: &[Vec<f64>]| {
            let m = d.iter().map(|r| r[j]).sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            (m, sd)
        };
        let ((ml, sl), (mm, _)) = (col(&lap), col(&mc.draws));
        assert!((ml - mm).abs() < 0.5 * sl, "{}: laplace {ml} hmc {mm} sd {sl}", map.names[j]);
    }
}

#[test]
fn small_scale_random_intercepts_sample_without_many_divergences() {
    let ms = ModelStructure::new(Variant::M1, 2, 12, None).unwrap();
    let mut th = ParamVector::zeros(&ms);
    th.alpha = vec![0.4, -0.3];
    th.beta = vec![-0.9, 0.2];
    th.log_kappa = 1.8;
    th.tau = vec![0.05, 0.05];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    th.z_aux = (0..ms.s).map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let data = simulate(&ms, &th, 600, 7);
    let fit = infer::sample_mcmc(&data, None, &ms, None, &small_mcmc(10)).unwrap();
    let total = fit.draws.len() as f64;
    assert!((fit.divergence_count as f64) < 0.02 * total, "{} divergences in {total} draws", fit.divergence_count);
}
