//! Named experiments: parameter grids over covariances, inverse temperatures,
//! depths and seeds, with CSV rows, a JSON summary and pass/fail checks.
//!
//! Every experiment is a pure function of its plan. Seed `i` of a plan is the
//! instance seed `derive_seed(base_seed, i)`, seeds are processed in parallel
//! and collected in order, so reruns produce byte-identical files.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::covariance::{CovarianceChoice, CovarianceSpec};
use crate::disorder::{rng::derive_seed, CremInstance};
use crate::error::{CremError, Result};
use crate::mcmc::{exhaustive_conductance, subtree_conductance_scan, transition_matrix};
use crate::numerics::log_sum_exp;
use crate::oracle::{exact_gibbs, tilt_density_check};
use crate::partition::LevelProfile;
use crate::sequential::{sampler_law, SequentialConfig};
use crate::stats::{linear_fit, median, quantile, wilson_interval, Summary};

pub const SCHEMA_VERSION: u32 = 1;

/// Registered experiment names.
pub const EXPERIMENTS: [&str; 13] = [
    "martingale",
    "annealedZ",
    "maxleaf",
    "concentration",
    "zratio",
    "seq-exact",
    "seq-tv",
    "mcmc-tv",
    "gap-decay",
    "tilt",
    "moments",
    "zbig",
    "conductance",
];

/// An inverse temperature, relative to the covariance it is used with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpec {
    /// `x · β_min`.
    TimesBetaMin(f64),
    /// `x · √(2 ln 2 / A(1))`.
    TimesBetaStar(f64),
    Absolute(f64),
}

impl BetaSpec {
    pub fn resolve(&self, spec: &CovarianceSpec<f64>) -> Result<f64> {
        Ok(match *self {
            BetaSpec::TimesBetaMin(x) => x * spec.thresholds()?.beta_min,
            BetaSpec::TimesBetaStar(x) => x * (2.0 * std::f64::consts::LN_2 / spec.eval(1.0)).sqrt(),
            BetaSpec::Absolute(b) => b,
        })
    }

    pub fn label(&self) -> String {
        match *self {
            BetaSpec::TimesBetaMin(x) => format!("{x}*beta_min"),
            BetaSpec::TimesBetaStar(x) => format!("{x}*beta_star"),
            BetaSpec::Absolute(b) => format!("{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Width of statistical bands in standard errors.
    pub n_se: f64,
    /// Agreement required of exact computations.
    pub exact: f64,
    /// Target total variation distance for approximate samplers.
    pub tv_target: f64,
    /// Required log-gap slope (upper bound).
    pub slope: f64,
}

/// Parameters of one experiment. Fields an experiment does not use are
/// ignored; see [`ExperimentPlan::preset`] for what each one reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub base_seed: u64,
    pub seeds: usize,
    pub covariances: Vec<CovarianceChoice>,
    pub betas: Vec<BetaSpec>,
    pub depths: Vec<usize>,
    /// Levels `n`, or lookahead depths `m` for `seq-tv`.
    pub levels: Vec<usize>,
    /// Lookahead at which `seq-tv` must reach `tv_target`.
    pub target_level: usize,
    pub m0: usize,
    /// Step-count checkpoints `T`.
    pub steps: Vec<u64>,
    pub extra_depth: usize,
    pub moment_p: Vec<f64>,
    /// Deviations `x` for tail bounds.
    pub deviations: Vec<f64>,
    /// `s` for `s`-conductance.
    pub s_values: Vec<f64>,
    pub tolerances: Tolerances,
    pub out_dir: Option<PathBuf>,
}

fn grem2() -> CovarianceChoice {
    let spec = CovarianceSpec::piecewise_linear(vec![(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)]).expect("valid breakpoints");
    CovarianceChoice::Inline(spec)
}

fn times_min(xs: &[f64]) -> Vec<BetaSpec> {
    xs.iter().map(|&x| BetaSpec::TimesBetaMin(x)).collect()
}

impl ExperimentPlan {
    /// Default grid for a registered experiment.
    pub fn preset(name: &str) -> Result<Self> {
        let mut plan = ExperimentPlan {
            name: name.to_string(),
            base_seed: 1,
            seeds: 10_000,
            covariances: vec![CovarianceChoice::brw()],
            betas: times_min(&[0.5]),
            depths: vec![20],
            levels: Vec::new(),
            target_level: 0,
            m0: 0,
            steps: Vec::new(),
            extra_depth: 0,
            moment_p: Vec::new(),
            deviations: Vec::new(),
            s_values: Vec::new(),
            tolerances: Tolerances { n_se: 4.0, exact: 1e-12, tv_target: 0.05, slope: -0.05 },
            out_dir: None,
        };
        match name {
            "martingale" => {
                plan.covariances.push(grem2());
                plan.betas = times_min(&[0.3, 0.5]);
                plan.depths = vec![15];
                plan.levels = vec![5, 10, 15];
            }
            "annealedZ" => {
                plan.betas = vec![BetaSpec::Absolute(0.5)];
                plan.depths = vec![8];
            }
            "maxleaf" => {
                plan.seeds = 1000;
                plan.betas = vec![BetaSpec::TimesBetaStar(0.5), BetaSpec::TimesBetaStar(1.0)];
                plan.depths = vec![10, 16, 20];
            }
            "concentration" => plan.deviations = vec![2.0, 4.0, 8.0],
            "zratio" => {
                plan.seeds = 200;
                plan.levels = vec![4, 8, 12, 16];
            }
            "moments" => plan.moment_p = vec![2.0],
            "zbig" => plan.betas = times_min(&[0.5, 0.9]),
            "seq-exact" => {
                plan.seeds = 20;
                plan.covariances.push(grem2());
                plan.betas = times_min(&[0.3, 0.6, 0.9]);
                plan.depths = vec![12];
            }
            "seq-tv" => {
                plan.seeds = 50;
                plan.depths = vec![12];
                plan.levels = vec![1, 2, 4, 8, 12];
                plan.target_level = 8;
            }
            "mcmc-tv" => {
                plan.seeds = 20;
                plan.depths = (1..=8).collect();
                plan.m0 = 2;
                plan.steps = (0..20).map(|k| 1u64 << k).chain([1_000_000]).collect();
            }
            "gap-decay" => {
                plan.seeds = 50;
                plan.betas = vec![BetaSpec::Absolute(1.0)];
                plan.depths = (4..=10).collect();
            }
            "tilt" => {
                plan.seeds = 100_000;
                plan.levels = vec![3];
                plan.extra_depth = 8;
            }
            "conductance" => {
                plan.seeds = 20;
                plan.depths = vec![2, 3, 4];
                plan.m0 = 1;
                plan.s_values = vec![0.0, 0.05];
            }
            other => return Err(CremError::UnknownExperiment(other.to_string())),
        }
        Ok(plan)
    }

    /// Reads a JSON plan. Missing fields come from the preset named by
    /// `name`, or `default_name` when the document has none.
    pub fn from_json(doc: &str, default_name: Option<&str>) -> Result<Self> {
        let value: Value = serde_json::from_str(doc)?;
        let name = value
            .get("name")
            .and_then(Value::as_str)
            .or(default_name)
            .ok_or_else(|| CremError::InvalidParameter("plan has no experiment name".into()))?
            .to_string();
        let mut base = serde_json::to_value(Self::preset(&name)?)?;
        merge(&mut base, value);
        Ok(serde_json::from_value(base)?)
    }

    pub fn from_file(path: &Path, default_name: Option<&str>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, default_name)
    }

    fn specs(&self, depth: usize) -> Result<Vec<(String, CovarianceSpec<f64>)>> {
        self.covariances.iter().map(|c| Ok((c.label(), c.resolve(depth)?))).collect()
    }

    fn seed(&self, i: usize) -> u64 {
        derive_seed(self.base_seed, i as u64)
    }

    fn check_nonempty<T>(&self, field: &str, xs: &[T]) -> Result<()> {
        if xs.is_empty() {
            return Err(CremError::InvalidParameter(format!("{}: `{field}` must not be empty", self.name)));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub label: String,
    pub value: f64,
    /// `<=`, `<` or `>=`.
    pub relation: String,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn le(label: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { label: label.into(), value, relation: "<=".into(), threshold, passed: value <= threshold }
    }

    fn lt(label: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { label: label.into(), value, relation: "<".into(), threshold, passed: value < threshold }
    }

    fn ge(label: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { label: label.into(), value, relation: ">=".into(), threshold, passed: value >= threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub schema_version: u32,
    pub passed: bool,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub columns: Vec<String>,
    #[serde(skip)]
    pub rows: Vec<Vec<String>>,
}

impl ExperimentReport {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            schema_version: SCHEMA_VERSION,
            passed: true,
            checks: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.columns.len());
        self.rows.push(cells);
    }

    fn check(&mut self, check: Check) {
        self.passed &= check.passed;
        self.checks.push(check);
    }

    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `NAME.csv` and `NAME.json` into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.name));
        let json_path = dir.join(format!("{}.json", self.name));
        self.write_csv(fs::File::create(&csv_path)?)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(&json_path, json)?;
        Ok((csv_path, json_path))
    }
}

fn csv_error(e: csv::Error) -> CremError {
    CremError::Io(std::io::Error::other(e))
}

/// Shortest round-trip form; very small or large floats in exponent form.
fn cell(x: impl std::fmt::Debug) -> String {
    format!("{x:?}")
}

/// Runs the experiment named by the plan.
pub fn run(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let report = match plan.name.as_str() {
        "martingale" => martingale(plan),
        "annealedZ" => annealed_z(plan),
        "maxleaf" => max_leaf(plan),
        "concentration" => concentration(plan),
        "zratio" => z_ratio(plan),
        "moments" => moments(plan),
        "zbig" => z_big(plan),
        "seq-exact" => seq_exact(plan),
        "seq-tv" => seq_tv(plan),
        "mcmc-tv" => mcmc_tv(plan),
        "gap-decay" => gap_decay(plan),
        "tilt" => tilt(plan),
        "conductance" => conductance(plan),
        other => Err(CremError::UnknownExperiment(other.to_string())),
    }?;
    if let Some(dir) = &plan.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Level profiles of seeds `0..len` for one covariance and depth. Banks are
/// shared by all experiments in the process: the depth-20 profiles behind
/// several experiments are computed once.
pub struct LevelBank {
    pub betas: Vec<f64>,
    pub profiles: Vec<LevelProfile>,
}

impl LevelBank {
    fn index(&self, beta: f64) -> usize {
        self.betas.iter().position(|b| b.to_bits() == beta.to_bits()).expect("requested beta is banked")
    }
}

type BankKey = (String, usize, u64);

fn banks() -> &'static Mutex<HashMap<BankKey, Arc<LevelBank>>> {
    static BANKS: OnceLock<Mutex<HashMap<BankKey, Arc<LevelBank>>>> = OnceLock::new();
    BANKS.get_or_init(Default::default)
}

/// Profiles for at least `seeds` seeds and at least the given inverse
/// temperatures; `0.5·β_min` and `0.9·β_min` are always included.
pub fn level_bank(
    spec: &CovarianceSpec<f64>,
    depth: usize,
    base_seed: u64,
    seeds: usize,
    betas: &[f64],
) -> Result<Arc<LevelBank>> {
    let key = (serde_json::to_string(spec)?, depth, base_seed);
    let mut map = banks().lock().unwrap_or_else(|e| e.into_inner());
    let cached = map.get(&key).cloned();
    let missing_beta = |bank: &LevelBank| betas.iter().any(|b| !bank.betas.iter().any(|c| c.to_bits() == b.to_bits()));
    if let Some(bank) = &cached {
        if !missing_beta(bank) && bank.profiles.len() >= seeds {
            return Ok(bank.clone());
        }
    }
    let mut all: Vec<f64> = match &cached {
        Some(bank) => bank.betas.clone(),
        None => {
            let beta_min = spec.thresholds().map(|t| t.beta_min).ok().filter(|b| b.is_finite());
            beta_min.map(|b| vec![0.5 * b, 0.9 * b]).unwrap_or_default()
        }
    };
    for &b in betas {
        if !all.iter().any(|c| c.to_bits() == b.to_bits()) {
            all.push(b);
        }
    }
    let (mut profiles, start) = match cached {
        Some(bank) if !missing_beta(&bank) => (bank.profiles.clone(), bank.profiles.len()),
        _ => (Vec::new(), 0),
    };
    let fresh: Vec<LevelProfile> = (start..seeds.max(start))
        .into_par_iter()
        .map(|i| {
            let inst = CremInstance::new(derive_seed(base_seed, i as u64), depth, spec.clone())?;
            LevelProfile::new(&inst, depth, &all)
        })
        .collect::<Result<_>>()?;
    profiles.extend(fresh);
    let bank = Arc::new(LevelBank { betas: all, profiles });
    map.insert(key, bank.clone());
    Ok(bank)
}

/// Result of [`zbig_probe`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZBigProbe {
    pub beta: f64,
    pub depth: usize,
    pub seeds: usize,
    /// Empirical `P(Ẑ_N > 1/2)`.
    pub fraction: f64,
    /// Wilson interval at `z` standard errors.
    pub lo: f64,
    pub hi: f64,
}

/// Largest depth accepted by [`zbig_probe`].
pub const ZBIG_MAX_DEPTH: usize = 20;

/// Estimates `P(Ẑ_{β,N} > 1/2)` over `seeds` instances.
pub fn zbig_probe(
    spec: &CovarianceSpec<f64>,
    beta: f64,
    depth: usize,
    seeds: usize,
    base_seed: u64,
    z: f64,
) -> Result<ZBigProbe> {
    if depth > ZBIG_MAX_DEPTH {
        return Err(CremError::EnumerationCap { depth, cap: ZBIG_MAX_DEPTH });
    }
    if seeds == 0 {
        return Err(CremError::InvalidParameter("zbig probe needs at least one seed".into()));
    }
    let bank = level_bank(spec, depth, base_seed, seeds, &[beta])?;
    let b = bank.index(beta);
    let hits = bank.profiles[..seeds].iter().filter(|p| p.log_z_hat(b, depth) > -std::f64::consts::LN_2).count();
    let (lo, hi) = wilson_interval(hits, seeds, z);
    Ok(ZBigProbe { beta, depth, seeds, fraction: hits as f64 / seeds as f64, lo, hi })
}

fn single<'a, T>(plan: &ExperimentPlan, field: &str, xs: &'a [T]) -> Result<&'a T> {
    match xs {
        [x] => Ok(x),
        _ => Err(CremError::InvalidParameter(format!("{}: `{field}` must have exactly one entry", plan.name))),
    }
}

/// Columns: covariance, beta, n, mean, se, z_score.
fn martingale(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    plan.check_nonempty("levels", &plan.levels)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "n", "mean", "se", "z_score"]);
    for (label, spec) in plan.specs(depth)? {
        let betas: Vec<f64> = plan.betas.iter().map(|b| b.resolve(&spec)).collect::<Result<_>>()?;
        let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &betas)?;
        for (bs, &beta) in plan.betas.iter().zip(&betas) {
            let b = bank.index(beta);
            for &n in &plan.levels {
                if n > depth {
                    return Err(CremError::InvalidParameter(format!("level {n} exceeds depth {depth}")));
                }
                let zs: Vec<f64> = bank.profiles[..plan.seeds].iter().map(|p| p.log_z_hat(b, n).exp()).collect();
                let s = Summary::of(&zs);
                let z = s.z_score(1.0);
                report.row(vec![label.clone(), cell(beta), cell(n), cell(s.mean), cell(s.se), cell(z)]);
                report.check(Check::le(format!("{label} beta={} n={n}: |mean Z^ - 1| / se", bs.label()), z, plan.tolerances.n_se));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, n, mean, se, annealed, z_score.
fn annealed_z(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "n", "mean", "se", "annealed", "z_score"]);
    for (label, spec) in plan.specs(depth)? {
        let betas: Vec<f64> = plan.betas.iter().map(|b| b.resolve(&spec)).collect::<Result<_>>()?;
        let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &betas)?;
        for &beta in &betas {
            let b = bank.index(beta);
            let zs: Vec<f64> = bank.profiles[..plan.seeds].iter().map(|p| p.log_z[b][depth].exp()).collect();
            let s = Summary::of(&zs);
            let annealed = (1u64 << depth) as f64 * (0.5 * beta * beta * spec.scaled(depth, depth)).exp();
            let z = s.z_score(annealed);
            report.row(vec![label.clone(), cell(beta), cell(depth), cell(s.mean), cell(s.se), cell(annealed), cell(z)]);
            report.check(Check::le(format!("{label} beta={beta} n={depth}: |mean Z - E Z| / se"), z, plan.tolerances.n_se));
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, depth, log_mean_max, log_bound.
fn max_leaf(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.check_nonempty("depths", &plan.depths)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "depth", "log_mean_max", "log_bound"]);
    for &depth in &plan.depths {
        for (label, spec) in plan.specs(depth)? {
            let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &[])?;
            for bs in &plan.betas {
                let beta = bs.resolve(&spec)?;
                let logs: Vec<f64> = bank.profiles[..plan.seeds].iter().map(|p| beta * p.max_x[depth]).collect();
                let log_mean = log_sum_exp(&logs) - (plan.seeds as f64).ln();
                let a = spec.scaled(depth, depth);
                let log_bound = std::f64::consts::LN_2 + beta * (2.0 * std::f64::consts::LN_2 * depth as f64 * a).sqrt();
                report.row(vec![label.clone(), cell(beta), cell(depth), cell(log_mean), cell(log_bound)]);
                report.check(Check::le(format!("{label} beta={} N={depth}: ln E max e^(beta X)", bs.label()), log_mean, log_bound));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, depth, x, tail, bound.
fn concentration(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    plan.check_nonempty("deviations", &plan.deviations)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "depth", "x", "tail", "bound"]);
    for (label, spec) in plan.specs(depth)? {
        let betas: Vec<f64> = plan.betas.iter().map(|b| b.resolve(&spec)).collect::<Result<_>>()?;
        let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &betas)?;
        for (bs, &beta) in plan.betas.iter().zip(&betas) {
            let b = bank.index(beta);
            let logs: Vec<f64> = bank.profiles[..plan.seeds].iter().map(|p| p.log_z[b][depth]).collect();
            let mean = Summary::of(&logs).mean;
            let a = spec.scaled(depth, depth);
            for &x in &plan.deviations {
                let tail = logs.iter().filter(|&&l| (l - mean).abs() >= x).count() as f64 / logs.len() as f64;
                let bound = 2.0 * (-x * x / (4.0 * a)).exp();
                report.row(vec![label.clone(), cell(beta), cell(depth), cell(x), cell(tail), cell(bound)]);
                report.check(Check::le(format!("{label} beta={} x={x}: P(|ln Z - E ln Z| >= x)", bs.label()), tail, bound));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, m, q90, median, mean.
fn z_ratio(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    plan.check_nonempty("levels", &plan.levels)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "m", "q90", "median", "mean"]);
    for (label, spec) in plan.specs(depth)? {
        let betas: Vec<f64> = plan.betas.iter().map(|b| b.resolve(&spec)).collect::<Result<_>>()?;
        let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &betas)?;
        for (bs, &beta) in plan.betas.iter().zip(&betas) {
            let b = bank.index(beta);
            let mut q90s = Vec::new();
            for &m in &plan.levels {
                let errs: Vec<f64> = bank.profiles[..plan.seeds]
                    .iter()
                    .map(|p| ((p.log_z_hat(b, m) - p.log_z_hat(b, depth)).exp() - 1.0).abs())
                    .collect();
                let q90 = quantile(&errs, 0.9);
                report.row(vec![
                    label.clone(),
                    cell(beta),
                    cell(m),
                    cell(q90),
                    cell(median(&errs)),
                    cell(Summary::of(&errs).mean),
                ]);
                q90s.push(q90);
            }
            for (w, ms) in q90s.windows(2).zip(plan.levels.windows(2)) {
                report.check(Check::lt(
                    format!("{label} beta={}: q90 at m={} minus q90 at m={}", bs.label(), ms[1], ms[0]),
                    w[1] - w[0],
                    0.0,
                ));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, p, moment, bound.
fn moments(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    plan.check_nonempty("moment_p", &plan.moment_p)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "p", "moment", "bound"]);
    for (label, spec) in plan.specs(depth)? {
        let a_max = spec.thresholds()?.a_max;
        let betas: Vec<f64> = plan.betas.iter().map(|b| b.resolve(&spec)).collect::<Result<_>>()?;
        let bank = level_bank(&spec, depth, plan.base_seed, plan.seeds, &betas)?;
        for (bs, &beta) in plan.betas.iter().zip(&betas) {
            let b = bank.index(beta);
            for &p in &plan.moment_p {
                let slack = 2.0 * std::f64::consts::LN_2 - p * beta * beta * a_max;
                if !(p > 1.0 && slack > 0.0) {
                    return Err(CremError::InvalidParameter(format!(
                        "moment order {p} needs 1 < p < 2 ln 2 / (beta^2 a_max)"
                    )));
                }
                let bound = 2f64.powf(4.0 * p + 1.0) / ((p - 1.0) * slack);
                let vals: Vec<f64> =
                    bank.profiles[..plan.seeds].iter().map(|q| (q.log_z_hat(b, depth).exp() - 1.0).abs().powf(p)).collect();
                let moment = Summary::of(&vals).mean;
                report.row(vec![label.clone(), cell(beta), cell(p), cell(moment), cell(bound)]);
                report.check(Check::le(format!("{label} beta={} p={p}: E|Z^ - 1|^p", bs.label()), moment, bound));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, depth, fraction, lo, hi.
fn z_big(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "depth", "fraction", "lo", "hi"]);
    for (label, spec) in plan.specs(depth)? {
        let mut probes = Vec::new();
        for bs in &plan.betas {
            let beta = bs.resolve(&spec)?;
            let probe = zbig_probe(&spec, beta, depth, plan.seeds, plan.base_seed, plan.tolerances.n_se)?;
            report.row(vec![
                label.clone(),
                cell(beta),
                cell(depth),
                cell(probe.fraction),
                cell(probe.lo),
                cell(probe.hi),
            ]);
            report.check(Check::lt(format!("{label} beta={}: -(lower confidence bound of P(Z^ > 1/2))", bs.label()), -probe.lo, 0.0));
            probes.push(probe);
        }
        probes.sort_by(|a, b| a.beta.total_cmp(&b.beta));
        for w in probes.windows(2) {
            report.check(Check::le(
                format!("{label}: P(Z^ > 1/2) at beta={} minus at beta={}", w[1].beta, w[0].beta),
                w[1].fraction - w[0].fraction,
                0.0,
            ));
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, seed, tv.
fn seq_exact(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "seed", "tv"]);
    for (label, spec) in plan.specs(depth)? {
        for bs in &plan.betas {
            let beta = bs.resolve(&spec)?;
            let tvs: Vec<f64> = (0..plan.seeds)
                .into_par_iter()
                .map(|i| {
                    let inst = CremInstance::new(plan.seed(i), depth, spec.clone())?;
                    let config = SequentialConfig { lookahead: depth, beta, path_seed: 0 };
                    sampler_law(&inst, &config)?.tv(&exact_gibbs(&inst, depth, beta)?)
                })
                .collect::<Result<_>>()?;
            for (i, tv) in tvs.iter().enumerate() {
                report.row(vec![label.clone(), cell(beta), cell(plan.seed(i)), cell(tv)]);
            }
            let worst = tvs.iter().copied().fold(0.0, f64::max);
            report.check(Check::le(format!("{label} beta={}: max TV(m=N law, Gibbs)", bs.label()), worst, plan.tolerances.exact));
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, m, median_tv, max_tv.
fn seq_tv(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    let depth = *single(plan, "depths", &plan.depths)?;
    plan.check_nonempty("levels", &plan.levels)?;
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "m", "median_tv", "max_tv"]);
    for (label, spec) in plan.specs(depth)? {
        for bs in &plan.betas {
            let beta = bs.resolve(&spec)?;
            // tvs[i][k]: seed i, lookahead levels[k]
            let tvs: Vec<Vec<f64>> = (0..plan.seeds)
                .into_par_iter()
                .map(|i| {
                    let inst = CremInstance::new(plan.seed(i), depth, spec.clone())?;
                    let gibbs = exact_gibbs(&inst, depth, beta)?;
                    plan.levels
                        .iter()
                        .map(|&m| sampler_law(&inst, &SequentialConfig { lookahead: m, beta, path_seed: 0 })?.tv(&gibbs))
                        .collect()
                })
                .collect::<Result<_>>()?;
            let mut medians = Vec::new();
            for (k, &m) in plan.levels.iter().enumerate() {
                let col: Vec<f64> = tvs.iter().map(|r| r[k]).collect();
                let med = median(&col);
                report.row(vec![label.clone(), cell(beta), cell(m), cell(med), cell(col.iter().copied().fold(0.0, f64::max))]);
                medians.push(med);
                if m == plan.target_level {
                    report.check(Check::le(format!("{label} beta={} m={m}: median TV", bs.label()), med, plan.tolerances.tv_target));
                }
            }
            for (w, ms) in medians.windows(2).zip(plan.levels.windows(2)) {
                report.check(Check::le(
                    format!("{label} beta={}: median TV at m={} minus at m={}", bs.label(), ms[1], ms[0]),
                    w[1] - w[0],
                    0.0,
                ));
            }
        }
    }
    Ok(report)
}

/// Detailed balance at every depth in `depths`; convergence of the
/// leaf-conditioned law of `V_T` from the root at the largest depth.
///
/// Columns: covariance, beta, depth, seed, steps, value, where `value` is the
/// detailed-balance error (`steps` = 0) or the total variation distance to
/// the Gibbs measure after `steps` steps (1 when no leaf is reachable yet).
fn mcmc_tv(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.check_nonempty("depths", &plan.depths)?;
    plan.check_nonempty("steps", &plan.steps)?;
    let top = *plan.depths.iter().max().expect("non-empty");
    let mut checkpoints = plan.steps.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "depth", "seed", "steps", "value"]);
    for bs in &plan.betas {
        for &depth in &plan.depths {
            for (label, spec) in plan.specs(depth)? {
                let beta = bs.resolve(&spec)?;
                let m0 = plan.m0.min(depth);
                let rows: Vec<(f64, Vec<f64>)> = (0..plan.seeds)
                    .into_par_iter()
                    .map(|i| {
                        let inst = CremInstance::new(plan.seed(i), depth, spec.clone())?;
                        let view = transition_matrix(&inst, m0, beta, false)?;
                        let balance = view.detailed_balance_error();
                        if depth != top {
                            return Ok((balance, Vec::new()));
                        }
                        let gibbs = exact_gibbs(&inst, depth, beta)?;
                        let mut law = view.law_after(0);
                        let mut t = 0;
                        let mut tvs = Vec::with_capacity(checkpoints.len());
                        for &target in &checkpoints {
                            while t < target {
                                law = view.step(&law);
                                t += 1;
                            }
                            let tv = match view.leaf_conditional(&law) {
                                Ok(cond) => cond.tv(&gibbs)?,
                                Err(_) => 1.0,
                            };
                            tvs.push(tv);
                            if tv <= plan.tolerances.tv_target {
                                break;
                            }
                        }
                        Ok((balance, tvs))
                    })
                    .collect::<Result<_>>()?;
                for (i, (balance, tvs)) in rows.iter().enumerate() {
                    let seed = plan.seed(i);
                    report.row(vec![label.clone(), cell(beta), cell(depth), cell(seed), cell(0), cell(balance)]);
                    for (t, tv) in checkpoints.iter().zip(tvs) {
                        report.row(vec![label.clone(), cell(beta), cell(depth), cell(seed), cell(t), cell(tv)]);
                    }
                    if depth == top {
                        let best = tvs.iter().copied().fold(1.0, f64::min);
                        report.check(Check::le(
                            format!("{label} beta={} N={depth} seed {seed}: min over T <= {} of TV", bs.label(), checkpoints.last().expect("non-empty")),
                            best,
                            plan.tolerances.tv_target,
                        ));
                    }
                }
                let worst = rows.iter().map(|r| r.0).fold(0.0, f64::max);
                report.check(Check::le(format!("{label} beta={} N={depth}: detailed balance error", bs.label()), worst, plan.tolerances.exact));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, depth, median_gap, min_gap, max_gap.
fn gap_decay(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    if plan.depths.len() < 2 {
        return Err(CremError::InvalidParameter("gap-decay needs at least two depths".into()));
    }
    let mut report = ExperimentReport::new(&plan.name, &["covariance", "beta", "depth", "median_gap", "min_gap", "max_gap"]);
    for choice in &plan.covariances {
        for bs in &plan.betas {
            let mut medians = Vec::new();
            let mut beta_label = String::new();
            for &depth in &plan.depths {
                let spec = choice.resolve(depth)?;
                let beta = bs.resolve(&spec)?;
                beta_label = bs.label();
                let gaps: Vec<f64> = (0..plan.seeds)
                    .into_par_iter()
                    .map(|i| {
                        let inst = CremInstance::new(plan.seed(i), depth, spec.clone())?;
                        transition_matrix(&inst, plan.m0.min(depth), beta, false)?.spectral_gap()
                    })
                    .collect::<Result<_>>()?;
                let med = median(&gaps);
                let lo = gaps.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = gaps.iter().copied().fold(0.0, f64::max);
                report.row(vec![choice.label(), cell(beta), cell(depth), cell(med), cell(lo), cell(hi)]);
                medians.push(med);
            }
            let label = choice.label();
            for (w, ds) in medians.windows(2).zip(plan.depths.windows(2)) {
                report.check(Check::lt(
                    format!("{label} beta={beta_label}: median gap at N={} minus at N={}", ds[1], ds[0]),
                    w[1] - w[0],
                    0.0,
                ));
            }
            let xs: Vec<f64> = plan.depths.iter().map(|&d| d as f64).collect();
            let ys: Vec<f64> = medians.iter().map(|g| g.ln()).collect();
            let (slope, _) = linear_fit(&xs, &ys);
            report.check(Check::lt(format!("{label} beta={beta_label}: slope of ln(median gap) in N"), slope, plan.tolerances.slope));
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, n, bin, z, lo, hi, f_hat, f_se, direct,
/// tilted, se, z_score.
fn tilt(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.check_nonempty("levels", &plan.levels)?;
    let mut report = ExperimentReport::new(
        &plan.name,
        &["covariance", "beta", "n", "bin", "z", "lo", "hi", "f_hat", "f_se", "direct", "tilted", "se", "z_score"],
    );
    for &n in &plan.levels {
        for (label, spec) in plan.specs(n + plan.extra_depth)? {
            for bs in &plan.betas {
                let beta = bs.resolve(&spec)?;
                let r = tilt_density_check(&spec, beta, n, plan.extra_depth, plan.seeds, plan.base_seed)?;
                for (k, b) in r.bins.iter().enumerate() {
                    report.row(vec![
                        label.clone(),
                        cell(beta),
                        cell(n),
                        cell(k),
                        cell(b.z),
                        cell(b.lo),
                        cell(b.hi),
                        cell(b.f_hat),
                        cell(b.f_se),
                        cell(b.direct),
                        cell(b.tilted),
                        cell(b.se),
                        cell(b.z_score),
                    ]);
                }
                let tag = format!("{label} beta={} n={n}", bs.label());
                report.check(Check::le(format!("{tag}: max bin |direct - tilted| / se"), r.max_z_score, plan.tolerances.n_se));
                let dz = (r.density_total - 1.0).abs() / r.density_se.max(f64::MIN_POSITIVE);
                report.check(Check::le(format!("{tag}: |E f^(Z^) - 1| / se"), dz, plan.tolerances.n_se));
                report.check(Check::ge(format!("{tag}: f^ non-decreasing (1 = yes)"), f64::from(u8::from(r.monotone)), 1.0));
            }
        }
    }
    Ok(report)
}

/// Columns: covariance, beta, depth, seed, s, exhaustive, lemma_bound,
/// subtree_conductance.
fn conductance(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.check_nonempty("depths", &plan.depths)?;
    plan.check_nonempty("s_values", &plan.s_values)?;
    let mut report = ExperimentReport::new(
        &plan.name,
        &["covariance", "beta", "depth", "seed", "s", "exhaustive", "lemma_bound", "subtree_conductance"],
    );
    for bs in &plan.betas {
        let mut worst_lemma = f64::INFINITY;
        let mut worst_subtree = f64::INFINITY;
        for &depth in &plan.depths {
            for (label, spec) in plan.specs(depth)? {
                let beta = bs.resolve(&spec)?;
                let rows: Vec<Vec<(f64, f64, f64, Option<f64>)>> = (0..plan.seeds)
                    .into_par_iter()
                    .map(|i| {
                        let inst = CremInstance::new(plan.seed(i), depth, spec.clone())?;
                        let view = transition_matrix(&inst, plan.m0.min(depth), beta, false)?;
                        plan.s_values
                            .iter()
                            .map(|&s| {
                                let exact = exhaustive_conductance(&view, s)?.value;
                                let scan = subtree_conductance_scan(&view, s)?;
                                Ok((s, exact, scan.lemma_bound.value, scan.conductance.map(|c| c.value)))
                            })
                            .collect()
                    })
                    .collect::<Result<_>>()?;
                for (i, per_s) in rows.iter().enumerate() {
                    for &(s, exact, lemma, subtree) in per_s {
                        report.row(vec![
                            label.clone(),
                            cell(beta),
                            cell(depth),
                            cell(plan.seed(i)),
                            cell(s),
                            cell(exact),
                            cell(lemma),
                            subtree.map(cell).unwrap_or_default(),
                        ]);
                        worst_lemma = worst_lemma.min(exact / lemma);
                        if let Some(sub) = subtree {
                            worst_subtree = worst_subtree.min(exact / (sub / 3.0));
                        }
                    }
                }
            }
        }
        // ratios are compared with a rounding allowance
        let floor = 1.0 - 1e-12;
        report.check(Check::ge(format!("beta={}: min exhaustive / lemma bound", bs.label()), worst_lemma, floor));
        report.check(Check::ge(
            format!("beta={}: min exhaustive / (subtree-union conductance / 3)", bs.label()),
            worst_subtree,
            floor,
        ));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> ExperimentPlan {
        let mut plan = ExperimentPlan::preset(name).unwrap();
        plan.seeds = plan.seeds.min(40);
        plan
    }

    #[test]
    fn presets_exist_for_every_name() {
        for name in EXPERIMENTS {
            let plan = ExperimentPlan::preset(name).unwrap();
            assert_eq!(plan.name, name);
            assert!(plan.seeds > 0);
        }
        assert!(matches!(ExperimentPlan::preset("nope"), Err(CremError::UnknownExperiment(_))));
    }

    #[test]
    fn json_overrides_merge_onto_preset() {
        let plan = ExperimentPlan::from_json(r#"{"name": "zratio", "seeds": 7, "tolerances": {"n_se": 3}}"#, None).unwrap();
        assert_eq!(plan.seeds, 7);
        assert_eq!(plan.tolerances.n_se, 3.0);
        assert_eq!(plan.tolerances.exact, 1e-12);
        assert_eq!(plan.levels, vec![4, 8, 12, 16]);
        let named = ExperimentPlan::from_json(r#"{"betas": [{"absolute": 0.4}]}"#, Some("moments")).unwrap();
        assert_eq!(named.betas, vec![BetaSpec::Absolute(0.4)]);
        assert!(ExperimentPlan::from_json(r#"{"name": "zratio", "sedes": 7}"#, None).is_err());
        assert!(ExperimentPlan::from_json("{}", None).is_err());
        let round = serde_json::to_string(&plan).unwrap();
        assert_eq!(ExperimentPlan::from_json(&round, None).unwrap(), plan);
    }

    #[test]
    fn beta_specs_resolve() {
        let brw = CovarianceSpec::brw();
        let star = (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((BetaSpec::TimesBetaMin(0.5).resolve(&brw).unwrap() - 0.5 * star).abs() < 1e-15);
        assert!((BetaSpec::TimesBetaStar(1.0).resolve(&brw).unwrap() - star).abs() < 1e-15);
        assert_eq!(BetaSpec::Absolute(0.25).resolve(&brw).unwrap(), 0.25);
    }

    #[test]
    fn zbig_at_zero_beta_is_certain() {
        let p = zbig_probe(&CovarianceSpec::brw(), 0.0, 10, 50, 3, 4.0).unwrap();
        assert_eq!(p.fraction, 1.0);
        assert!(p.lo > 0.7);
        assert!(zbig_probe(&CovarianceSpec::brw(), 0.0, 21, 50, 3, 4.0).is_err());
    }

    #[test]
    fn bank_extends_and_reuses() {
        let spec = CovarianceSpec::brw();
        let a = level_bank(&spec, 6, 77, 10, &[0.3]).unwrap();
        let b = level_bank(&spec, 6, 77, 5, &[0.3]).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let c = level_bank(&spec, 6, 77, 20, &[0.3]).unwrap();
        assert_eq!(c.profiles.len(), 20);
        assert_eq!(&c.profiles[..10], &a.profiles[..]);
        let d = level_bank(&spec, 6, 77, 20, &[0.4]).unwrap();
        let (ia, id) = (a.index(0.3), d.index(0.3));
        assert_eq!(a.profiles[3].log_z[ia], d.profiles[3].log_z[id]);
    }

    #[test]
    fn small_runs_are_deterministic() {
        let dir = std::env::temp_dir().join(format!("crem-exp-{}", std::process::id()));
        for name in ["seq-exact", "conductance", "annealedZ"] {
            let mut plan = small(name);
            plan.out_dir = Some(dir.clone());
            let first = run(&plan).unwrap();
            let csv1 = fs::read(dir.join(format!("{name}.csv"))).unwrap();
            let second = run(&plan).unwrap();
            let csv2 = fs::read(dir.join(format!("{name}.csv"))).unwrap();
            assert_eq!(first, second);
            assert_eq!(csv1, csv2);
            assert_eq!(first.rows.len() + 1, String::from_utf8(csv1).unwrap().lines().count());
            let json: Value = serde_json::from_slice(&fs::read(dir.join(format!("{name}.json"))).unwrap()).unwrap();
            assert_eq!(json["schema_version"], 1);
            assert_eq!(json["passed"], first.passed);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn failing_tolerance_is_reported() {
        let mut plan = small("seq-tv");
        plan.depths = vec![8];
        plan.levels = vec![1, 8];
        plan.target_level = 1;
        plan.tolerances.tv_target = 1e-9;
        let report = run(&plan).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failed_checks().count(), 1);
    }

    #[test]
    fn invalid_grids_are_rejected() {
        let mut plan = small("moments");
        plan.moment_p = vec![8.0];
        assert!(run(&plan).is_err());
        let mut plan = small("zratio");
        plan.depths = vec![10, 12];
        assert!(run(&plan).is_err());
    }
}
