use std::fs;
use std::path::Path;
use std::process::Command;

use opal_tomo::harness::{
    read_aggregate_csv, recorded_times, run_cells, run_experiment, SimConfig, AGGREGATE_FILE,
    AGGREGATE_HEADER, SCENARIO_FILE, SUMMARY_FILE,
};

const BIN: &str = env!("CARGO_BIN_EXE_opal");

fn config(body: &str) -> SimConfig {
    SimConfig::from_toml(body, None).unwrap()
}

const CLASSICAL: &str = r#"
seed = 5
horizon = 2000
mc_runs = 3
scenarios = 2
topology = { kind = "star", links = 4 }

[[policies]]
kind = "opal"

[[policies]]
kind = "uniform"

[[policies]]
kind = "oracle"

[[policies]]
kind = "iterative"
"#;

#[test]
fn artifacts_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(CLASSICAL);
    cfg.output = Some(dir.path().join("a"));
    run_experiment(&cfg).unwrap();
    cfg.output = Some(dir.path().join("b"));
    run_experiment(&cfg).unwrap();
    for f in [AGGREGATE_FILE, SCENARIO_FILE, SUMMARY_FILE] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn aggregate_shape_and_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(CLASSICAL);
    cfg.output = Some(dir.path().to_path_buf());
    run_experiment(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, AGGREGATE_HEADER.join(","));
    let rows = read_aggregate_csv(&dir.path().join(AGGREGATE_FILE)).unwrap();
    let times = recorded_times(2000, cfg.stride());
    assert_eq!(rows.len(), 4 * times.len());
    assert!(!text.contains("NaN"));
    let scen = fs::read_to_string(dir.path().join(SCENARIO_FILE)).unwrap();
    assert_eq!(scen.lines().count(), 1 + 2 * 4 * times.len());
}

#[test]
fn single_run_has_zero_spread() {
    let mut cfg = config(CLASSICAL);
    cfg.mc_runs = 1;
    cfg.scenarios = 1;
    let report = run_experiment(&cfg).unwrap();
    for r in &report.aggregate {
        let s = r.stats;
        for v in [s.regret_std, s.dist_act_std, s.dist_est_std, s.mse_std] {
            assert!(v == 0.0 || v.is_infinite(), "{r:?}");
        }
    }
}

#[test]
fn regret_is_never_negative_and_oracle_tracks() {
    let cfg = config(CLASSICAL);
    let (scenarios, series) = run_cells(&cfg).unwrap();
    for s in &series {
        for (r, t) in s.regret.iter().zip(&s.t) {
            assert!(*r >= -1e-9, "{} at t={t}: {r}", s.policy);
        }
        if s.policy == "oracle" {
            // dist_actual is O(1/t)
            let m = scenarios[s.scenario].probes.len() as f64;
            let (&t, &d) = (s.t.last().unwrap(), s.dist_actual.last().unwrap());
            assert!(d * t as f64 <= m, "{d} at {t}");
            assert_eq!(*s.dist_estimated.last().unwrap(), 0.0);
        }
    }
}

#[test]
fn uniform_is_optimal_on_a_symmetric_quantum_star() {
    let cfg = config(
        r#"
horizon = 3000
probe_mode = "ri_multicast"
topology = { kind = "star", links = 6 }
mu = { source = "fixed", values = [0.8, 0.8, 0.8, 0.8, 0.8, 0.8] }

[[policies]]
kind = "uniform"
"#,
    );
    let report = run_experiment(&cfg).unwrap();
    let last = report.aggregate.last().unwrap();
    assert!(last.stats.regret_mean.abs() < 1e-12, "{last:?}");
}

#[test]
fn opal_beats_uniform_on_a_skewed_star() {
    let cfg = config(
        r#"
seed = 3
horizon = 20000
mc_runs = 10
topology = { kind = "star", links = 4 }
mu = { source = "fixed", values = [0.95, 0.9, 0.5, 0.3] }

[[policies]]
kind = "opal"

[[policies]]
kind = "uniform"
"#,
    );
    let report = run_experiment(&cfg).unwrap();
    let opal = report.policy("opal").unwrap().final_stats;
    let uni = report.policy("uniform").unwrap().final_stats;
    assert!(opal.regret_mean < uni.regret_mean / 10.0);
    assert!(opal.dist_act_mean < uni.dist_act_mean);
}

#[test]
fn er_scenarios_differ_and_edge_list_mu_is_used() {
    let cfg = config(
        r#"
horizon = 500
scenarios = 2
topology = { kind = "er", nodes = 10, edge_prob = 0.4 }

[[policies]]
kind = "uniform"
"#,
    );
    let a = cfg.scenario(0).unwrap();
    let b = cfg.scenario(1).unwrap();
    assert_ne!(a.topology, b.topology);

    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("net.txt"),
        "# triangle with a tail\n1,2,0.9\n2,3,0.8\n1,3,0.7\n3,4,0.95\n",
    )
    .unwrap();
    let text = r#"
horizon = 500
topology = { kind = "edge_list", path = "net.txt" }
mu = { source = "file" }

[[policies]]
kind = "opal"
"#;
    let path = dir.path().join("cfg.toml");
    fs::write(&path, text).unwrap();
    let cfg = SimConfig::load(&path).unwrap();
    let sc = cfg.scenario(0).unwrap();
    assert_eq!(sc.mu.values(), &[0.9, 0.8, 0.7, 0.95]);
    assert_eq!(sc.probes.len(), 4);
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p
}

fn opal(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn cli_simulate_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "horizon = 1000\nmc_runs = 2\ntopology = { kind = \"star\", links = 3 }\n\
         [[policies]]\nkind = \"opal\"\n[[policies]]\nkind = \"uniform\"\n",
    );
    let res = opal(&["simulate", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join(AGGREGATE_FILE).exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["policies"].as_array().unwrap().len(), 2);

    let res = opal(&["slope", "--input", out.join(AGGREGATE_FILE).to_str().unwrap()]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("opal\t")));
    assert!(text.lines().any(|l| l.starts_with("uniform\t")));
}

#[test]
fn cli_topology_prints_inverse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "horizon = 100\ntopology = { kind = \"star\", links = 3 }\n[[policies]]\nkind = \"uniform\"\n",
    );
    let res = opal(&["topology", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.contains("nodes: 4"));
    assert!(text.contains("links: 3"));
    assert!(text.contains("rank(Q): 3"));
    assert!(text.contains("Q^-1:"));
    assert!(text.contains("unicast 1-4-2"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write_config(
        dir.path(),
        "horizon = 100\nfrobnicate = 1\ntopology = { kind = \"star\", links = 3 }\n[[policies]]\nkind = \"uniform\"\n",
    );
    assert_eq!(opal(&["simulate", "--config", bad_key.to_str().unwrap()]).status.code(), Some(2));

    let two_links = write_config(
        dir.path(),
        "horizon = 100\ntopology = { kind = \"star\", links = 2 }\n[[policies]]\nkind = \"uniform\"\n",
    );
    assert_eq!(opal(&["simulate", "--config", two_links.to_str().unwrap()]).status.code(), Some(3));

    let missing = dir.path().join("nope.toml");
    assert_eq!(opal(&["simulate", "--config", missing.to_str().unwrap()]).status.code(), Some(4));

    let bad_csv = dir.path().join("bad.csv");
    fs::write(&bad_csv, "policy,t,regret_mean\nopal,1,0.5\n").unwrap();
    let res = opal(&["slope", "--input", bad_csv.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("regret_std"));
}
