//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::Result;
use hbb::infer::{self, Engine, FitResult, HyperMode, MapOptions, McmcConfig};
use hbb::model::{self, ModelStructure, Observation, ParamVector, ReversalScope, Variant};
use hbb::scores::{self, fmt17};
use hbb::simlab::{self, Scale, Scenario, ScenarioName};
use hbb::survey::{self, CalibrationTransform, Margin, SandwichResult, SingletonPolicy, SurveyDesign};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{read_json, read_matrix_csv, read_table, write_json, write_matrix_csv, write_rows, NamedMatrix, Schema, Table};
use crate::manifest::RunManifest;
use crate::Failure;

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Global {
    /// Configuration file.
    pub config: Option<PathBuf>,
    /// Seed override.
    pub seed: Option<u64>,
    /// Skip upstream hash checks.
    pub force: bool,
}

/// JSON configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Model variant.
    pub variant: Variant,
    /// Estimation engine.
    pub engine: Engine,
    /// Seed when `--seed` is absent.
    pub seed: u64,
    /// Optimizer settings.
    pub map: MapOptions,
    /// Sampler settings (its seed is replaced by the run seed).
    pub mcmc: McmcConfig,
    /// Laplace draws written by a MAP fit.
    pub laplace_draws: usize,
    /// Interval level for Wald tables.
    pub level: f64,
    /// Handling of single-PSU strata.
    pub singleton: SingletonPolicy,
    /// State-by-moderator matrix for M3b, one row per state in label order.
    pub policy: Option<Vec<Vec<f64>>>,
    /// Covariate column (0 = intercept) for reversal probabilities.
    pub reversal_covariate: usize,
    /// Simulation scenario; overrides the preset.
    pub scenario: Option<Scenario>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            variant: Variant::M1,
            engine: Engine::Map,
            seed: 1,
            map: MapOptions::default(),
            mcmc: McmcConfig::default(),
            laplace_draws: 1000,
            level: 0.90,
            singleton: SingletonPolicy::Error,
            policy: None,
            reversal_covariate: 1,
            scenario: None,
        }
    }
}

fn load_config(g: &Global) -> Result<Config> {
    match &g.config {
        Some(p) => read_json(p),
        None => Ok(Config::default()),
    }
}

/// Contents of theta_hat.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    /// Manifest content hash of the run.
    pub manifest_hash: String,
    /// Variant.
    pub variant: Variant,
    /// Engine.
    pub engine: Engine,
    /// Column mapping of the input.
    pub schema: Schema,
    /// M3b moderators.
    pub policy: Option<Vec<Vec<f64>>>,
    /// Flat parameter names.
    pub names: Vec<String>,
    /// Flat estimate.
    pub flat: Vec<f64>,
    /// Structured estimate.
    pub theta: ParamVector,
    /// Log posterior at the estimate.
    pub log_posterior: f64,
    /// Optimizer iterations.
    pub iterations: usize,
    /// Hyperparameter handling.
    pub hyper_mode: Option<HyperMode>,
}

fn policy_matrix(policy: &Option<Vec<Vec<f64>>>) -> Result<Option<DMatrix<f64>>> {
    let Some(rows) = policy else { return Ok(None) };
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Failure::schema("policy rows must have equal length").into());
    }
    Ok(Some(DMatrix::from_row_iterator(rows.len(), c, rows.iter().flatten().copied())))
}

impl FitArtifact {
    fn structure(&self) -> Result<ModelStructure> {
        Ok(ModelStructure::new(self.variant, self.schema.covariates.len(), self.schema.states.len(), policy_matrix(&self.policy)?)?)
    }
}

/// Contents of diagnostics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Manifest content hash of the run.
    pub manifest_hash: String,
    /// Engine.
    pub engine: Engine,
    /// All checks passed.
    pub passed: bool,
    /// Largest split R-hat (MCMC).
    pub rhat_max: Option<f64>,
    /// Smallest bulk ESS (MCMC).
    pub ess_bulk_min: Option<f64>,
    /// Divergent transitions (MCMC).
    pub divergences: usize,
    /// Optimizer iterations (MAP).
    pub iterations: usize,
    /// 1-based rows with y > 0 and n < 3.
    pub identification_warning_rows: Vec<usize>,
    /// Per-parameter convergence summary (MCMC).
    pub summary: Option<infer::Diagnostics>,
}

fn check_schema(table: &Table, art: &FitArtifact) -> Result<()> {
    if table.schema.covariates != art.schema.covariates || table.schema.states != art.schema.states {
        return Err(Failure::schema("data columns or states differ from those used by the fit").into());
    }
    Ok(())
}

/// `hbb fit`.
pub fn fit(g: &Global, data: &Path, out: &Path, variant: Option<Variant>, engine: Option<Engine>, no_design: bool) -> Result<()> {
    let cfg = load_config(g)?;
    let variant = variant.unwrap_or(cfg.variant);
    let engine = engine.unwrap_or(cfg.engine);
    let seed = g.seed.unwrap_or(cfg.seed);
    let table = read_table(data, !no_design)?;
    let ms = ModelStructure::new(variant, table.schema.covariates.len(), table.schema.states.len(), policy_matrix(&cfg.policy)?)?;
    let settings = serde_json::to_string(&(variant, engine, &cfg))?;
    let man = RunManifest::begin("fit", g.config.as_deref(), &[("data", data)], seed, &settings, no_design)?;
    let weights = if no_design {
        None
    } else {
        Some(survey::normalize_weights(&table.obs.iter().map(|o| o.w_raw).collect::<Vec<_>>())?)
    };
    let obs = &table.obs;
    let (fit, draws): (FitResult, Vec<Vec<f64>>) = match engine {
        Engine::Map => {
            let f = infer::fit_map(obs, weights.as_deref(), &ms, None, &cfg.map)?;
            let d = infer::laplace_draws(&f, cfg.laplace_draws, seed)?;
            (f, d)
        }
        Engine::Mcmc => {
            let mc = McmcConfig { seed, ..cfg.mcmc };
            let f = infer::sample_mcmc(obs, weights.as_deref(), &ms, None, &mc)?;
            let d = f.draws.clone();
            (f, d)
        }
    };
    std::fs::create_dir_all(out)?;
    let art = FitArtifact {
        manifest_hash: man.content_hash.clone(),
        variant,
        engine,
        schema: table.schema.clone(),
        policy: cfg.policy.clone(),
        names: fit.names.clone(),
        flat: fit.flat_hat.clone(),
        theta: fit.theta_hat.clone(),
        log_posterior: fit.log_posterior,
        iterations: fit.iterations,
        hyper_mode: fit.hyper_mode,
    };
    write_json(&out.join("theta_hat.json"), &art)?;
    write_matrix_csv(&out.join("draws.csv"), &fit.names, &draws)?;
    let (rhat_max, ess_min, passed) = match &fit.diagnostics {
        Some(d) => {
            let r = d.rhat_max();
            let e = d.ess_bulk.iter().copied().fold(f64::INFINITY, f64::min);
            (Some(r), Some(e), r < 1.01 && e > 100.0 && fit.divergence_count == 0)
        }
        None => (None, None, engine == Engine::Map),
    };
    let diag = FitDiagnostics {
        manifest_hash: man.content_hash.clone(),
        engine,
        passed,
        rhat_max,
        ess_bulk_min: ess_min,
        divergences: fit.divergence_count,
        iterations: fit.iterations,
        identification_warning_rows: model::identification_warnings(obs).into_iter().map(|i| i + 1).collect(),
        summary: fit.diagnostics.clone(),
    };
    write_json(&out.join("diagnostics.json"), &diag)?;
    man.finish(out, &["theta_hat.json", "draws.csv", "diagnostics.json"])?;
    Ok(())
}

fn load_fit(g: &Global, fit_dir: &Path, data: &Path) -> Result<(RunManifest, FitArtifact, Vec<Vec<f64>>)> {
    let man = RunManifest::load(fit_dir)?;
    man.verify_artifacts(fit_dir, &["theta_hat.json", "draws.csv"], g.force)?;
    man.verify_input("data", data, g.force)?;
    let art: FitArtifact = read_json(&fit_dir.join("theta_hat.json"))?;
    let (_, draws) = read_matrix_csv(&fit_dir.join("draws.csv"), art.names.len())?;
    Ok((man, art, draws))
}

/// Contents of sandwich.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichArtifact {
    /// Manifest content hash of the run.
    pub manifest_hash: String,
    /// Fixed-effect names.
    pub names: Vec<String>,
    /// Bread.
    pub h_obs: NamedMatrix,
    /// Meat.
    pub j_cluster: NamedMatrix,
    /// Sandwich covariance.
    pub v_sand: NamedMatrix,
    /// Design effect ratios.
    pub der: Vec<f64>,
    /// Bands.
    pub classification: Vec<survey::DerClass>,
    /// Σ_h (C_h − 1).
    pub dof: usize,
    /// Deviations were profiled out of the bread.
    pub profiled: bool,
}

/// `hbb sandwich`.
pub fn sandwich(g: &Global, fit_dir: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let upstream = RunManifest::load(fit_dir)?;
    if upstream.no_design {
        return Err(Failure::design("the fit was run with --no-design; sandwich needs stratum, psu and weight columns").into());
    }
    let (_, art, draws) = load_fit(g, fit_dir, data)?;
    let table = read_table(data, true)?;
    check_schema(&table, &art)?;
    let ms = art.structure()?;
    let obs = &table.obs;
    let design = SurveyDesign::from_observations(obs)?;
    if cfg.singleton == SingletonPolicy::Error {
        if let Some((h, _)) = design.psu_counts().into_iter().find(|(_, c)| *c < 2) {
            let label = table.schema.strata.get(h).cloned().unwrap_or_else(|| h.to_string());
            return Err(Failure::design(format!("stratum {label} has a single PSU")).into());
        }
    }
    let settings = serde_json::to_string(&cfg)?;
    let seed = g.seed.unwrap_or(cfg.seed);
    let man = RunManifest::begin(
        "sandwich",
        g.config.as_deref(),
        &[("data", data), ("theta_hat", &fit_dir.join("theta_hat.json")), ("draws", &fit_dir.join("draws.csv"))],
        seed,
        &settings,
        false,
    )?;
    let with_dev = ms.q > 0;
    let h = scores::hessian(&art.theta, obs, Some(&design.weights_norm), &ms, with_dev)?;
    let sm = scores::score_matrix(&art.theta, obs, &ms, with_dev)?;
    let sw = if with_dev {
        SandwichResult::compute_profiled(&h, &sm, &design, &art.theta.deviation_covariance(), cfg.singleton)?
    } else {
        SandwichResult::compute(&h, &sm, &design, None, cfg.singleton)?
    };
    let f = sw.names.len();
    let block: Vec<usize> = (0..f).collect();
    let calibrated = survey::cholesky_calibrate(&draws, &art.flat, &sw.v_sand, &block, CalibrationTransform::Cholesky)?;
    std::fs::create_dir_all(out)?;
    let mut buf = Vec::new();
    sm.write_csv(&mut buf)?;
    std::fs::write(out.join("scores.csv"), buf)?;
    write_json(
        &out.join("sandwich.json"),
        &SandwichArtifact {
            manifest_hash: man.content_hash.clone(),
            names: sw.names.clone(),
            h_obs: NamedMatrix::new(&sw.names, &sw.h_obs),
            j_cluster: NamedMatrix::new(&sw.names, &sw.j_cluster),
            v_sand: NamedMatrix::new(&sw.names, &sw.v_sand),
            der: sw.der.clone(),
            classification: sw.classification.clone(),
            dof: sw.dof,
            profiled: with_dev,
        },
    )?;
    let m = draws.len() as f64;
    let mut der_rows = Vec::new();
    for p in 0..f {
        let mean = draws.iter().map(|d| d[p]).sum::<f64>() / m;
        let var_mc = draws.iter().map(|d| (d[p] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let v = sw.v_sand[(p, p)];
        let h_inv = v / sw.der[p];
        der_rows.push(vec![
            sw.names[p].clone(),
            fmt17(h_inv),
            fmt17(v),
            fmt17(var_mc),
            fmt17(sw.der[p]),
            fmt17(var_mc / h_inv),
            fmt17(h_inv.sqrt()),
            fmt17(v.sqrt()),
            fmt17(var_mc.sqrt()),
            sw.classification[p].label().into(),
        ]);
    }
    write_rows(
        &out.join("der.csv"),
        &["parameter", "h_inv", "v_sand", "sigma_draws", "der", "der_draws", "sd_h", "sd_sand", "sd_draws", "class"],
        &der_rows,
    )?;
    write_matrix_csv(&out.join("calibrated_draws.csv"), &art.names, &calibrated)?;
    let wald = sw.wald(&art.flat[..f], cfg.level);
    let wald_rows: Vec<Vec<String>> = (0..f)
        .map(|p| {
            vec![sw.names[p].clone(), fmt17(art.flat[p]), fmt17(sw.v_sand[(p, p)].sqrt()), fmt17(wald[p].0), fmt17(wald[p].1), fmt17(cfg.level)]
        })
        .collect();
    write_rows(&out.join("wald.csv"), &["parameter", "estimate", "se", "lo", "hi", "level"], &wald_rows)?;
    man.finish(out, &["scores.csv", "sandwich.json", "der.csv", "calibrated_draws.csv", "wald.csv"])?;
    Ok(())
}

/// `hbb decompose`.
pub fn decompose(g: &Global, fit_dir: &Path, calibrated: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let (_, art, mut draws) = load_fit(g, fit_dir, data)?;
    let mut inputs: Vec<(&str, PathBuf)> = vec![("data", data.to_path_buf()), ("theta_hat", fit_dir.join("theta_hat.json"))];
    if let Some(dir) = calibrated {
        let cm = RunManifest::load(dir)?;
        cm.verify_artifacts(dir, &["calibrated_draws.csv"], g.force)?;
        draws = read_matrix_csv(&dir.join("calibrated_draws.csv"), art.names.len())?.1;
        inputs.push(("draws", dir.join("calibrated_draws.csv")));
    } else {
        inputs.push(("draws", fit_dir.join("draws.csv")));
    }
    let table = read_table(data, art.schema.design)?;
    check_schema(&table, &art)?;
    let ms = art.structure()?;
    let k = cfg.reversal_covariate;
    if k >= ms.p {
        return Err(Failure::schema(format!("reversal_covariate {k} exceeds the covariate count {}", ms.p)).into());
    }
    let seed = g.seed.unwrap_or(cfg.seed);
    let input_refs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (*r, p.as_path())).collect();
    let man = RunManifest::begin("decompose", g.config.as_deref(), &input_refs, seed, &serde_json::to_string(&cfg)?, !art.schema.design)?;
    let params: Vec<ParamVector> = draws.iter().map(|d| ParamVector::from_flat(d, &ms)).collect::<hbb::Result<_>>()?;
    let ame = model::ame_decompose(&params, &table.obs, &ms)?;
    std::fs::create_dir_all(out)?;
    let rows: Vec<Vec<String>> = ame
        .iter()
        .map(|r| {
            let mut v = vec![art.schema.covariates[r.covariate].clone()];
            v.extend([r.extensive.mean, r.intensive.mean, r.total.mean, r.ext_share.mean].map(fmt17));
            for b in [r.extensive, r.intensive, r.total, r.ext_share] {
                v.push(fmt17(b.lo));
                v.push(fmt17(b.hi));
            }
            v
        })
        .collect();
    write_rows(
        &out.join("ame.csv"),
        &[
            "covariate", "extensive", "intensive", "total", "ext_share", "extensive_lo", "extensive_hi", "intensive_lo", "intensive_hi",
            "total_lo", "total_hi", "ext_share_lo", "ext_share_hi",
        ],
        &rows,
    )?;
    let point = model::ame_per_draw(&art.theta, &table.obs, &ms)?;
    let lae_rows: Vec<Vec<String>> = (1..ms.p)
        .map(|c| {
            let e = model::MarginalEffect::from_components(point[c].0, point[c].1);
            vec![art.schema.covariates[c].clone(), fmt17(e.lae), fmt17(e.lie), fmt17(e.total), fmt17(e.ext_share)]
        })
        .collect();
    write_rows(&out.join("lae_lie.csv"), &["covariate", "lae", "lie", "total", "ext_share"], &lae_rows)?;
    let mut rev = vec![vec![
        "population".to_string(),
        art.schema.covariates[k].clone(),
        fmt17(model::reversal_probability(&params, &ms, ReversalScope::Population, k)?),
    ]];
    if ms.variant != Variant::M0 {
        for (s, label) in art.schema.states.iter().enumerate() {
            let p = model::reversal_probability(&params, &ms, ReversalScope::State(s), k)?;
            rev.push(vec![format!("state:{label}"), art.schema.covariates[k].clone(), fmt17(p)]);
        }
    }
    write_rows(&out.join("reversal.csv"), &["scope", "covariate", "probability"], &rev)?;
    man.finish(out, &["ame.csv", "lae_lie.csv", "reversal.csv"])?;
    Ok(())
}

/// `hbb simulate`.
pub fn simulate(g: &Global, scenario: &str, scale: Scale, replications: Option<usize>, engine: Option<Engine>, out: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let mut sc = match &cfg.scenario {
        Some(s) => s.clone(),
        None => Scenario::preset(scenario.parse::<ScenarioName>()?, scale),
    };
    if let Some(r) = replications {
        sc.replications = r;
    }
    sc.validate()?;
    let engine = engine.unwrap_or(cfg.engine);
    let seed = g.seed.unwrap_or(cfg.seed);
    let settings = serde_json::to_string(&(&sc, engine))?;
    let inputs: Vec<(&str, &Path)> = g.config.as_deref().map(|p| vec![("config", p)]).unwrap_or_default();
    let man = RunManifest::begin("simulate", g.config.as_deref(), &inputs, seed, &settings, false)?;
    let records = simlab::run_campaign(&sc, seed, engine)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut log = String::new();
    for r in &records {
        let head = vec![
            sc.name.to_string(),
            r.replication.to_string(),
            r.estimator.to_string(),
            format!("{:?}", r.engine).to_lowercase(),
            r.seed.to_string(),
            r.n_sample.to_string(),
            fmt17(r.kish_deff),
            fmt17(r.clip_fraction),
        ];
        if let Some(e) = &r.error {
            log.push_str(&format!("replication {} {}: {e}\n", r.replication, r.estimator));
            let mut row = head.clone();
            row.extend(["", "", "", "", "", "", ""].map(String::from));
            row.push(e.clone());
            rows.push(row);
        }
        for p in &r.params {
            let mut row = head.clone();
            row.extend([
                p.name.clone(),
                fmt17(p.truth),
                fmt17(p.estimate),
                fmt17(p.lo),
                fmt17(p.hi),
                u8::from(p.covered).to_string(),
                fmt17(p.width),
                String::new(),
            ]);
            rows.push(row);
        }
    }
    write_rows(
        &out.join("records.csv"),
        &[
            "scenario", "replication", "estimator", "engine", "seed", "n_sample", "kish_deff", "clip_fraction", "parameter", "truth", "estimate",
            "lo", "hi", "covered", "width", "error",
        ],
        &rows,
    )?;
    std::fs::write(out.join("errors.log"), &log)?;
    for e in simlab::Estimator::ALL {
        let total = records.iter().filter(|r| r.estimator == e).count();
        let ok = records.iter().filter(|r| r.estimator == e && r.ok()).count();
        if (ok as f64) < 0.8 * total as f64 {
            return Err(Failure::numeric(format!("{e}: only {ok} of {total} replications succeeded; see errors.log")).into());
        }
    }
    let metrics = simlab::aggregate_metrics(&records, sc.nominal_level)?;
    let mrows: Vec<Vec<String>> = metrics
        .rows
        .iter()
        .map(|m| {
            vec![
                m.parameter.clone(),
                m.estimator.to_string(),
                m.n.to_string(),
                fmt17(m.coverage),
                fmt17(m.mcse),
                fmt17(m.rb),
                fmt17(m.rmse),
                fmt17(m.median_width),
                m.wr.map(fmt17).unwrap_or_default(),
                u8::from(m.flagged).to_string(),
            ]
        })
        .collect();
    write_rows(
        &out.join("metrics.csv"),
        &["parameter", "estimator", "n", "coverage", "mcse", "rb_percent", "rmse", "median_width", "wr", "flagged"],
        &mrows,
    )?;
    #[derive(Serialize)]
    struct MetricsJson<'a> {
        manifest_hash: &'a str,
        scenario: &'a Scenario,
        engine: Engine,
        metrics: &'a simlab::MetricTable,
    }
    write_json(&out.join("metrics.json"), &MetricsJson { manifest_hash: &man.content_hash, scenario: &sc, engine, metrics: &metrics })?;
    let prow: Vec<Vec<String>> = metrics
        .rows
        .iter()
        .map(|m| {
            vec![
                m.parameter.clone(),
                m.estimator.to_string(),
                fmt17(m.coverage),
                fmt17((m.coverage - 2.0 * m.mcse).max(0.0)),
                fmt17((m.coverage + 2.0 * m.mcse).min(1.0)),
                fmt17(sc.nominal_level),
            ]
        })
        .collect();
    write_rows(&out.join("plot_data.csv"), &["parameter", "estimator", "coverage", "band_lo", "band_hi", "nominal"], &prow)?;
    man.finish(out, &["records.csv", "errors.log", "metrics.csv", "metrics.json", "plot_data.csv"])?;
    Ok(())
}

/// Outcome of one informativeness test, or why it could not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome<T> {
    /// Test result.
    Ok(T),
    /// Reason the test was skipped.
    Err {
        /// Message.
        error: String,
    },
}

impl<T> From<hbb::Result<T>> for Outcome<T> {
    fn from(r: hbb::Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Ok(v),
            Err(e) => Outcome::Err { error: e.to_string() },
        }
    }
}

/// Pfeffermann tests for one margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfeffermannPair {
    /// Intercept and first covariate.
    pub univariate: Outcome<survey::PfeffermannResult>,
    /// All covariates.
    pub full: Outcome<survey::PfeffermannResult>,
}

/// Named Hausman row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHausman {
    /// Covariate.
    pub covariate: String,
    /// Comparison.
    #[serde(flatten)]
    pub row: survey::HausmanRow,
}

/// Contents of design_report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    /// Manifest content hash of the run.
    pub manifest_hash: String,
    /// Weight distribution.
    pub weights: survey::WeightSummary,
    /// δ = log(w_max/w_min)/log N.
    pub bvm_delta: f64,
    /// δ > 0.5.
    pub bvm_flag: bool,
    /// Σ_h (C_h − 1).
    pub dof: usize,
    /// Extensive-margin log-weight regression.
    pub pfeffermann_ext: PfeffermannPair,
    /// Intensive-margin log-weight regression.
    pub pfeffermann_int: PfeffermannPair,
    /// Extensive-margin Hausman comparison.
    pub hausman_ext: Outcome<Vec<NamedHausman>>,
    /// Intensive-margin Hausman comparison.
    pub hausman_int: Outcome<Vec<NamedHausman>>,
}

/// `hbb diagnose`.
pub fn diagnose(g: &Global, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(g)?;
    let table = read_table(data, true)?;
    let seed = g.seed.unwrap_or(cfg.seed);
    let man = RunManifest::begin("diagnose", g.config.as_deref(), &[("data", data)], seed, &serde_json::to_string(&cfg)?, false)?;
    let obs: &[Observation] = &table.obs;
    let w: Vec<f64> = obs.iter().map(|o| o.w_raw).collect();
    let weights = survey::weight_summary(&w)?;
    let (bvm_delta, bvm_flag) = survey::bvm_weight_diagnostic(&w, w.len())?;
    let design = SurveyDesign::from_observations(obs)?;
    let p = table.schema.covariates.len();
    let uni: Vec<usize> = (0..p.min(2)).collect();
    let full: Vec<usize> = (0..p).collect();
    let pair = |m| PfeffermannPair {
        univariate: survey::pfeffermann_test(obs, m, &uni).into(),
        full: survey::pfeffermann_test(obs, m, &full).into(),
    };
    let named = |m| -> Outcome<Vec<NamedHausman>> {
        survey::hausman_margin(obs, m, &full, SingletonPolicy::Collapse)
            .map(|rows| {
                rows.into_iter().enumerate().map(|(i, row)| NamedHausman { covariate: table.schema.covariates[i].clone(), row }).collect()
            })
            .into()
    };
    let report = DesignReport {
        manifest_hash: man.content_hash.clone(),
        weights,
        bvm_delta,
        bvm_flag,
        dof: design.dof(),
        pfeffermann_ext: pair(Margin::Ext),
        pfeffermann_int: pair(Margin::Int),
        hausman_ext: named(Margin::Ext),
        hausman_int: named(Margin::Int),
    };
    std::fs::create_dir_all(out)?;
    write_json(&out.join("design_report.json"), &report)?;
    man.finish(out, &["design_report.json"])?;
    Ok(())
}
