use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hbb::model::Observation;
use hbb::simlab::{self, Scale, Scenario, ScenarioName};
use tempfile::TempDir;

fn hbb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbb")).args(args).output().expect("spawn hbb")
}

fn ok(args: &[&str]) {
    let o = hbb(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(d: &Path) -> &str {
    d.to_str().unwrap()
}

fn sample_obs(seed: u64) -> Vec<Observation> {
    let mut sc = Scenario::preset(ScenarioName::S3, Scale::Desk);
    sc.population_size = 6_000;
    sc.target_n = 700;
    let pop = simlab::generate_population(&sc.truth, sc.population_size, seed).unwrap();
    simlab::draw_sample(&pop, &sc, seed + 1).unwrap().data
}

fn write_csv(path: &Path, obs: &[Observation]) {
    let mut s = String::from("y,n,state,stratum,psu,weight,x1,x2,x3,x4\n");
    for o in obs {
        s.push_str(&format!(
            "{},{},s{:02},h{},{},{},{},{},{},{}\n",
            o.y, o.n, o.state, o.stratum, o.psu, o.w_raw, o.x[1], o.x[2], o.x[3], o.x[4]
        ));
    }
    fs::write(path, s).unwrap();
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data.csv");
        write_csv(&data, &sample_obs(7));
        Self { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn fit(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let mut args = vec!["--seed", "11", "fit", "--data", p(&self.data), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn pipeline_writes_artifacts_and_is_deterministic() {
    let fx = Fixture::new();
    let fit = fx.fit("fit", &[]);
    for f in ["theta_hat.json", "draws.csv", "diagnostics.json", "manifest.json"] {
        assert!(fit.join(f).exists(), "{f}");
    }
    let again = fx.fit("fit2", &[]);
    assert_eq!(fs::read(fit.join("theta_hat.json")).unwrap(), fs::read(again.join("theta_hat.json")).unwrap());
    assert_eq!(fs::read(fit.join("draws.csv")).unwrap(), fs::read(again.join("draws.csv")).unwrap());

    let sw = fx.path("sw");
    ok(&["sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&sw)]);
    for f in ["scores.csv", "sandwich.json", "der.csv", "calibrated_draws.csv", "wald.csv", "manifest.json"] {
        assert!(sw.join(f).exists(), "{f}");
    }
    let der = fs::read_to_string(sw.join("der.csv")).unwrap();
    assert!(der.starts_with("parameter,h_inv,v_sand,sigma_draws,der,der_draws,sd_h,sd_sand,sd_draws,class"));
    assert_eq!(der.lines().count(), 1 + 2 * 5 + 1);

    let dec = fx.path("dec");
    ok(&["decompose", "--fit", p(&fit), "--calibrated", p(&sw), "--data", p(&fx.data), "--out", p(&dec)]);
    let ame = fs::read_to_string(dec.join("ame.csv")).unwrap();
    assert_eq!(ame.lines().count(), 1 + 4);
    let rev = fs::read_to_string(dec.join("reversal.csv")).unwrap();
    assert!(rev.lines().nth(1).unwrap().starts_with("population,x1,"));
    assert!(rev.contains("state:s00"));
    assert!(dec.join("lae_lie.csv").exists());
}

#[test]
fn tampered_upstream_needs_force() {
    let fx = Fixture::new();
    let fit = fx.fit("fit", &[]);
    let draws = fit.join("draws.csv");
    let mut text = fs::read_to_string(&draws).unwrap();
    text.push('\n');
    fs::write(&draws, text).unwrap();
    let sw = fx.path("sw");
    let o = hbb(&["sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&sw)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    ok(&["--force", "sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&sw)]);
}

#[test]
fn draws_with_wrong_width_are_structural_errors() {
    let fx = Fixture::new();
    let fit = fx.fit("fit", &[]);
    fs::write(fit.join("draws.csv"), "a,b\n1,2\n").unwrap();
    let o = hbb(&["--force", "sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&fx.path("sw"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn no_design_fit_cannot_be_corrected() {
    let fx = Fixture::new();
    let fit = fx.fit("fit", &["--no-design"]);
    let o = hbb(&["sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&fx.path("sw"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn singleton_stratum_is_named() {
    let fx = Fixture::new();
    let mut obs = sample_obs(7);
    let extra = Observation { stratum: 99, psu: 9_999, ..obs[0].clone() };
    obs.push(extra);
    write_csv(&fx.data, &obs);
    let fit = fx.fit("fit", &[]);
    let o = hbb(&["sandwich", "--fit", p(&fit), "--data", p(&fx.data), "--out", p(&fx.path("sw"))]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("h99"));
}

#[test]
fn schema_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "y,n,state,x1,x1\n1,2,a,0.1,0.2\n").unwrap();
    let o = hbb(&["fit", "--data", p(&bad), "--out", p(&out), "--no-design"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("x1"));

    fs::write(&bad, "y,n,state,x1\n1,0,a,0.1\n0,0,b,0.3\n1,3,a,0.2\n").unwrap();
    let o = hbb(&["fit", "--data", p(&bad), "--out", p(&out), "--no-design"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 row(s) have n = 0"));

    fs::write(&bad, "y,n,state,x1\n1,2,a,0.1\n").unwrap();
    let o = hbb(&["fit", "--data", p(&bad), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stratum, psu, weight"));
}

#[test]
fn diagnose_reports_every_block() {
    let fx = Fixture::new();
    let out = fx.path("diag");
    ok(&["diagnose", "--data", p(&fx.data), "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("design_report.json")).unwrap()).unwrap();
    for k in ["weights", "bvm_delta", "dof", "pfeffermann_ext", "pfeffermann_int", "hausman_ext", "hausman_int"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    assert!(v["pfeffermann_int"]["full"]["p_value"].is_number());
}

fn small_scenario_config(dir: &Path) -> PathBuf {
    let mut sc = Scenario::preset(ScenarioName::S0, Scale::Desk);
    sc.population_size = 3_000;
    sc.target_n = 400;
    sc.replications = 3;
    let cfg = dir.join("cfg.json");
    fs::write(&cfg, serde_json::json!({ "scenario": sc }).to_string()).unwrap();
    cfg
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small_scenario_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["--config", p(&cfg), "--seed", "5", "simulate", "--out", p(out)]);
    }
    for f in ["records.csv", "metrics.csv", "metrics.json", "plot_data.csv", "errors.log", "manifest.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("records.csv")).unwrap(), fs::read(b.join("records.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let records = fs::read_to_string(a.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 3 * 3 * 5);
}

#[test]
fn zero_replications_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = hbb(&["simulate", "--replications", "0", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
}
