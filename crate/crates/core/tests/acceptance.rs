//! Acceptance suite: one registered experiment per criterion, run with its
//! preset grid. Prints one PASS/FAIL line per criterion with the wall time
//! and the time budget, and exits non-zero if any criterion fails.
//!
//! `CREM_ACCEPTANCE=4,7` restricts the run to the listed criteria;
//! `CREM_ACCEPTANCE_OUT=DIR` also writes each experiment's CSV and JSON.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use crem::experiments::{run, ExperimentPlan};

struct Criterion {
    id: u32,
    experiment: &'static str,
    what: &'static str,
    budget: Duration,
}

const fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

const CRITERIA: [Criterion; 12] = [
    Criterion { id: 1, experiment: "seq-exact", what: "full-lookahead sequential law equals Gibbs (TV <= 1e-12)", budget: minutes(1) },
    Criterion { id: 2, experiment: "seq-tv", what: "median sequential TV non-increasing in m, <= 0.05 at m=8", budget: minutes(10) },
    Criterion { id: 3, experiment: "mcmc-tv", what: "detailed balance <= 1e-12; leaf law of V_T within TV 0.05 for some T <= 1e6", budget: minutes(10) },
    Criterion { id: 4, experiment: "zratio", what: "q90 of |Z^_m / Z^_N - 1| decreasing in m at N=20", budget: minutes(15) },
    Criterion { id: 5, experiment: "martingale", what: "mean Z^_n within 4 SE of 1", budget: minutes(5) },
    Criterion { id: 6, experiment: "annealedZ", what: "mean Z_8 within 4 SE of 2^8 e^(beta^2 a(8)/2)", budget: minutes(1) },
    Criterion { id: 7, experiment: "moments", what: "E|Z^_N - 1|^2 below the moment bound", budget: minutes(5) },
    Criterion { id: 8, experiment: "maxleaf", what: "E max e^(beta X) <= 2 e^(beta sqrt(2 ln2 N a(N)))", budget: minutes(5) },
    Criterion { id: 9, experiment: "concentration", what: "tail of |ln Z - E ln Z| below 2 e^(-x^2/(4 a(N)))", budget: minutes(5) },
    Criterion { id: 10, experiment: "gap-decay", what: "median spectral gap strictly decreasing, log slope < -0.05", budget: minutes(10) },
    Criterion { id: 11, experiment: "tilt", what: "tilted and direct subtree laws agree within 4 SE on 32 bins", budget: minutes(15) },
    Criterion { id: 12, experiment: "conductance", what: "exhaustive conductance >= subtree-union lemma bound", budget: minutes(1) },
];

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("CREM_ACCEPTANCE").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let out = std::env::var_os("CREM_ACCEPTANCE_OUT").map(PathBuf::from);
    let mut failures = 0;
    let total = Instant::now();
    for c in CRITERIA.iter().filter(|c| only.as_ref().is_none_or(|ids| ids.contains(&c.id))) {
        let mut plan = ExperimentPlan::preset(c.experiment).expect("registered experiment");
        plan.out_dir = out.clone();
        let start = Instant::now();
        let result = run(&plan);
        let elapsed = start.elapsed();
        let timing = format!(
            "{:.1}s, budget {}s{}",
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if elapsed > c.budget { ", over budget" } else { "" }
        );
        match result {
            Ok(report) if report.passed => {
                println!("PASS criterion {:>2} [{}] {} ({timing})", c.id, c.experiment, c.what);
            }
            Ok(report) => {
                failures += 1;
                println!("FAIL criterion {:>2} [{}] {} ({timing})", c.id, c.experiment, c.what);
                for check in report.failed_checks() {
                    println!("     {}: {} {} {}", check.label, check.value, check.relation, check.threshold);
                }
            }
            Err(e) => {
                failures += 1;
                println!("FAIL criterion {:>2} [{}] error: {e} ({timing})", c.id, c.experiment);
            }
        }
    }
    println!("acceptance: {failures} failing, {:.1}s total", total.elapsed().as_secs_f64());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
