//! Runs a desk-scale campaign and prints the metric table.

use std::time::Instant;

use hbb::infer::Engine;
use hbb::simlab::{aggregate_metrics, run_campaign, Scale, Scenario, ScenarioName};

fn main() {
    let mut args = std::env::args().skip(1);
    let name: ScenarioName = args.next().unwrap_or_else(|| "S0".into()).parse().expect("scenario");
    let mut sc = Scenario::preset(name, Scale::Desk);
    if let Some(r) = args.next() {
        sc.replications = r.parse().expect("count");
    }
    if let Some(k) = args.next() {
        sc.informativeness_scale = k.parse().expect("scale");
    }
    let t = Instant::now();
    let recs = run_campaign(&sc, 20_260_101, Engine::Map).expect("campaign");
    let deff: Vec<f64> = recs.iter().step_by(3).map(|r| r.kish_deff).collect();
    let mut d = deff.clone();
    d.sort_by(f64::total_cmp);
    println!("{name}: {:.1}s, median DEFF {:.2} [{:.2}, {:.2}]", t.elapsed().as_secs_f64(), d[d.len() / 2], d[0], d[d.len() - 1]);
    let m = aggregate_metrics(&recs, sc.nominal_level).expect("metrics");
    println!("failures {:?}", m.failures);
    for r in &m.rows {
        println!(
            "{:10} {} cov {:.2} ({:.3}) rb {:+7.1}% rmse {:.3} width {:.3} wr {}",
            r.parameter,
            r.estimator,
            r.coverage,
            r.mcse,
            r.rb,
            r.rmse,
            r.median_width,
            r.wr.map_or("-".into(), |v| format!("{v:.2}"))
        );
    }
}
