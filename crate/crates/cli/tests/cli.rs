use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn crem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crem")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json_lines(out: &Output) -> Vec<Value> {
    stdout(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("crem-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn partition_ops_agree() {
    let exact = &json_lines(&crem(&["partition", "--op", "exact", "--seed", "4", "--depth", "7", "--beta", "0.6"]))[0];
    let annealed = &json_lines(&crem(&["partition", "--op", "annealed", "--seed", "4", "--depth", "7", "--beta", "0.6"]))[0];
    let normalized =
        &json_lines(&crem(&["partition", "--op", "normalized", "--seed", "4", "--depth", "7", "--beta", "0.6"]))[0];
    let (e, a, n) = (
        exact["log_value"].as_f64().unwrap(),
        annealed["log_value"].as_f64().unwrap(),
        normalized["log_value"].as_f64().unwrap(),
    );
    assert!((e - a - n).abs() < 1e-12);
    // ln E Z_7 = 7 ln 2 + 0.18 · 7 / 1 for the branching random walk
    assert!((a - (7.0 * std::f64::consts::LN_2 + 0.5 * 0.36 * 7.0)).abs() < 1e-12);
    assert_eq!(exact["params"]["n"], 7);
    let root = &json_lines(&crem(&[
        "partition", "--op", "subtree", "--seed", "4", "--depth", "7", "--beta", "0.6", "--m", "7",
    ]))[0];
    assert!((root["log_value"].as_f64().unwrap() - n).abs() < 1e-12);
}

#[test]
fn sequential_samples_are_reproducible() {
    let args = ["sample", "seq", "--seed", "2", "--path-seed", "5", "--depth", "9", "--beta-mult", "0.5", "--lookahead", "3", "--replicas", "4"];
    let a = json_lines(&crem(&args));
    let b = json_lines(&crem(&args));
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    for line in &a {
        assert_eq!(line["leaf_bits"].as_str().unwrap().len(), 9);
        assert_eq!(line["log_weight_trace"].as_array().unwrap().len(), 9 - 3 + 1);
    }
}

#[test]
fn mcmc_lines_have_the_documented_fields() {
    let lines = json_lines(&crem(&[
        "sample", "mcmc", "--seed", "1", "--depth", "5", "--beta-mult", "0.5", "--m0", "1", "--steps", "300", "--replicas", "3",
    ]));
    assert_eq!(lines.len(), 3);
    for line in &lines {
        assert_eq!(line["leaf_bits"].as_str().unwrap().len(), 5);
        assert!(line["steps_used"].as_u64().unwrap() >= 300);
        let f = line["accepted_frac"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f));
    }
    // a chain that cannot reach depth 5 in 2 steps reports the failure
    let failed = json_lines(&crem(&[
        "sample", "mcmc", "--seed", "1", "--depth", "5", "--beta", "0.5", "--steps", "2", "--retries", "2",
    ]));
    assert!(failed[0]["leaf_bits"].is_null());
    assert!(failed[0]["error"].as_str().unwrap().contains("2 attempts"));
}

#[test]
fn spectrum_csv() {
    let text = stdout(&crem(&["spectrum", "--depth", "3", "--beta", "1.0", "--seeds", "4"]));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,N,gap"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[1], "3");
        let gap: f64 = cells[2].parse().unwrap();
        assert!(gap > 0.0 && gap <= 1.0);
    }
}

#[test]
fn oracle_outputs() {
    let gibbs = &json_lines(&crem(&["oracle", "gibbs", "--seed", "3", "--depth", "4", "--beta", "0.8"]))[0];
    let probs: Vec<f64> = gibbs["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 16);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let csv = stdout(&crem(&["oracle", "gibbs", "--seed", "3", "--depth", "4", "--beta", "0.8", "--csv"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("bits,prob"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0000");
    assert!((first[1].parse::<f64>().unwrap() - probs[0]).abs() < 1e-15);

    let full = &json_lines(&crem(&["oracle", "tv", "--seed", "3", "--depth", "6", "--beta-mult", "0.5", "--lookahead", "6"]))[0];
    assert!(full["tv"].as_f64().unwrap() < 1e-12);
    let early = &json_lines(&crem(&[
        "oracle", "tv", "--seed", "3", "--depth", "6", "--beta-mult", "0.5", "--sampler", "mcmc", "--steps", "3",
    ]))[0];
    assert!(early["tv"].is_null());

    let tilt = &json_lines(&crem(&[
        "oracle", "tilt", "--beta-mult", "0.5", "--n", "1", "--extra-depth", "3", "--seeds", "200",
    ]))[0];
    assert_eq!(tilt["report"]["bins"].as_array().unwrap().len(), 32);
}

#[test]
fn dump_lists_every_vertex() {
    let text = stdout(&crem(&["dump", "--seed", "9", "--depth", "3"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path_bits,depth,Y,X");
    assert_eq!(lines.len(), 1 + 15);
    let grem = stdout(&crem(&["--covariance", "grem:0,2:0.5,1:0.5", "dump", "--depth", "3", "--max-depth", "2"]));
    assert_eq!(grem.lines().count(), 1 + 7);
}

#[test]
fn covariance_from_file() {
    let dir = scratch("cov");
    let path = dir.join("cov.json");
    std::fs::write(&path, r#"{"breakpoints": [[0, 0], [0.5, 0.25], [1, 1]]}"#).unwrap();
    let out = crem(&["--covariance", path.to_str().unwrap(), "partition", "--op", "annealed", "--depth", "8", "--beta", "1", "--n", "4"]);
    let v = &json_lines(&out)[0];
    // a(4) = 8 · A(1/2) = 2
    assert!((v["log_value"].as_f64().unwrap() - (4.0 * std::f64::consts::LN_2 + 1.0)).abs() < 1e-12);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn experiment_exit_codes_follow_tolerances() {
    let dir = scratch("exp");
    let pass = dir.join("pass.json");
    std::fs::write(&pass, r#"{"seeds": 30, "depths": [2, 3]}"#).unwrap();
    let out = crem(&["experiment", "run", "conductance", "--config", pass.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    let report: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["schema_version"], 1);
    let csv = std::fs::read_to_string(dir.join("conductance.csv")).unwrap();
    assert!(csv.starts_with("covariance,beta,depth,seed,s,exhaustive,lemma_bound,subtree_conductance\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 30 * 2);
    assert!(dir.join("conductance.json").exists());

    let fail = dir.join("fail.json");
    std::fs::write(&fail, r#"{"seeds": 10, "depths": [8], "levels": [1, 8], "target_level": 1, "tolerances": {"tv_target": 1e-9}}"#).unwrap();
    let out = crem(&["experiment", "run", "seq-tv", "--config", fail.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = crem(&["experiment", "run", "no-such-thing"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment"));

    let plan: Value = serde_json::from_str(&stdout(&crem(&["experiment", "plan", "zratio"]))).unwrap();
    assert_eq!(plan["seeds"], 200);
    std::fs::remove_dir_all(dir).ok();
}
