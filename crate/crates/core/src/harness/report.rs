use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::SimConfig;
use super::runner::RunSeries;

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SCENARIO_FILE: &str = "scenarios.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub const AGGREGATE_HEADER: [&str; 10] = [
    "policy",
    "t",
    "regret_mean",
    "regret_std",
    "dist_act_mean",
    "dist_act_std",
    "dist_est_mean",
    "dist_est_std",
    "mse_mean",
    "mse_std",
];

/// Mean and population standard deviation. Values are sorted first so the
/// result does not depend on input order; any infinite value makes both
/// infinite.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::INFINITY, f64::INFINITY);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return (f64::INFINITY, f64::INFINITY);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub regret_mean: f64,
    pub regret_std: f64,
    pub dist_act_mean: f64,
    pub dist_act_std: f64,
    pub dist_est_mean: f64,
    pub dist_est_std: f64,
    pub mse_mean: f64,
    pub mse_std: f64,
}

impl MetricStats {
    fn from_columns(cols: [&[f64]; 4]) -> Self {
        let [r, a, e, m] = cols.map(mean_std);
        MetricStats {
            regret_mean: r.0,
            regret_std: r.1,
            dist_act_mean: a.0,
            dist_act_std: a.1,
            dist_est_mean: e.0,
            dist_est_std: e.1,
            mse_mean: m.0,
            mse_std: m.1,
        }
    }

    fn means(&self) -> [f64; 4] {
        [
            self.regret_mean,
            self.dist_act_mean,
            self.dist_est_mean,
            self.mse_mean,
        ]
    }

    fn cells(&self) -> [f64; 8] {
        [
            self.regret_mean,
            self.regret_std,
            self.dist_act_mean,
            self.dist_act_std,
            self.dist_est_mean,
            self.dist_est_std,
            self.mse_mean,
            self.mse_std,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub policy: String,
    pub t: u64,
    #[serde(flatten)]
    pub stats: MetricStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRow {
    pub scenario: usize,
    pub policy: String,
    pub t: u64,
    pub stats: MetricStats,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    pub policy: String,
    pub final_t: u64,
    #[serde(rename = "final")]
    pub final_stats: MetricStats,
    /// Log-log regret slope over the last decade; absent when undefined.
    pub regret_slope: Option<f64>,
    pub allocator_calls_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub horizon: u64,
    pub mc_runs: usize,
    pub scenarios: usize,
    pub policies: Vec<PolicySummary>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub aggregate: Vec<AggregateRow>,
    pub by_scenario: Vec<ScenarioRow>,
    pub summary: Summary,
}

impl Report {
    pub fn rows_for<'a>(&'a self, policy: &'a str) -> impl Iterator<Item = &'a AggregateRow> + 'a {
        self.aggregate.iter().filter(move |r| r.policy == policy)
    }

    pub fn policy(&self, policy: &str) -> Option<&PolicySummary> {
        self.summary.policies.iter().find(|p| p.policy == policy)
    }
}

/// Per-scenario statistics over runs, then statistics over scenario means.
/// With a single scenario the aggregate keeps the across-run spread.
pub fn aggregate(config: &SimConfig, series: &[RunSeries]) -> Report {
    let labels: Vec<String> = config.policies.iter().map(|p| p.label()).collect();
    let mut groups: BTreeMap<(usize, usize), Vec<&RunSeries>> = BTreeMap::new();
    for s in series {
        let p = labels.iter().position(|l| *l == s.policy).unwrap_or(usize::MAX);
        groups.entry((p, s.scenario)).or_default().push(s);
    }

    let mut by_scenario = Vec::new();
    let mut per_policy: BTreeMap<usize, Vec<Vec<MetricStats>>> = BTreeMap::new();
    for (&(p, scenario), runs) in &groups {
        let times = &runs[0].t;
        let mut rows = Vec::with_capacity(times.len());
        for (k, &t) in times.iter().enumerate() {
            let col = |f: fn(&RunSeries) -> &Vec<f64>| -> Vec<f64> {
                runs.iter().map(|r| f(r)[k]).collect()
            };
            let stats = MetricStats::from_columns([
                &col(|r| &r.regret),
                &col(|r| &r.dist_actual),
                &col(|r| &r.dist_estimated),
                &col(|r| &r.mse),
            ]);
            by_scenario.push(ScenarioRow {
                scenario,
                policy: labels[p].clone(),
                t,
                stats,
            });
            rows.push(stats);
        }
        per_policy.entry(p).or_default().push(rows);
    }

    let mut aggregate = Vec::new();
    let mut summaries = Vec::new();
    for (&p, scen_rows) in &per_policy {
        let label = &labels[p];
        let times: Vec<u64> = by_scenario
            .iter()
            .filter(|r| r.policy == *label && r.scenario == 0)
            .map(|r| r.t)
            .collect();
        for (k, &t) in times.iter().enumerate() {
            let stats = if scen_rows.len() == 1 {
                scen_rows[0][k]
            } else {
                let means: Vec<[f64; 4]> = scen_rows.iter().map(|s| s[k].means()).collect();
                let col = |i: usize| -> Vec<f64> { means.iter().map(|m| m[i]).collect() };
                MetricStats::from_columns([&col(0), &col(1), &col(2), &col(3)])
            };
            aggregate.push(AggregateRow {
                policy: label.clone(),
                t,
                stats,
            });
        }
        let rows: Vec<&AggregateRow> = aggregate.iter().filter(|r| r.policy == *label).collect();
        let ts: Vec<u64> = rows.iter().map(|r| r.t).collect();
        let regrets: Vec<f64> = rows.iter().map(|r| r.stats.regret_mean).collect();
        let last = rows.last().expect("at least one recorded time");
        let calls: Vec<f64> = series
            .iter()
            .filter(|s| s.policy == *label)
            .map(|s| s.allocator_calls as f64)
            .collect();
        summaries.push(PolicySummary {
            policy: label.clone(),
            final_t: last.t,
            final_stats: last.stats,
            regret_slope: fit_regret_slope(&ts, &regrets, 10.0),
            allocator_calls_mean: mean_std(&calls).0,
        });
    }

    Report {
        aggregate,
        by_scenario,
        summary: Summary {
            seed: config.seed,
            horizon: config.horizon,
            mc_runs: config.mc_runs,
            scenarios: config.scenarios,
            policies: summaries,
        },
    }
}

/// Least-squares slope of `log(value)` against `log(t)` over points with
/// `t >= t_last / window`. Non-positive or non-finite values are skipped;
/// fewer than two usable points give `None`.
pub fn fit_regret_slope(t: &[u64], values: &[f64], window: f64) -> Option<f64> {
    let t_last = *t.last()? as f64;
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(values)
        .filter(|&(&ti, &v)| ti as f64 >= t_last / window && v > 0.0 && v.is_finite())
        .map(|(&ti, &v)| ((ti as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

fn fmt_cells(cells: &[f64]) -> Vec<String> {
    cells.iter().map(|x| x.to_string()).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(AGGREGATE_HEADER).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![r.policy.clone(), r.t.to_string()];
        rec.extend(fmt_cells(&r.stats.cells()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scenario_csv(path: &Path, rows: &[ScenarioRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["scenario"];
    header.extend(AGGREGATE_HEADER);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![r.scenario.to_string(), r.policy.clone(), r.t.to_string()];
        rec.extend(fmt_cells(&r.stats.cells()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if let Some(missing) = AGGREGATE_HEADER.iter().find(|h| !headers.iter().any(|x| x == **h)) {
        return Err(Error::Config(format!(
            "{}: missing column {missing}",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Writes the aggregate CSV, the scenario-level CSV and the JSON summary
/// into `dir`, returning their paths.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let agg = dir.join(AGGREGATE_FILE);
    let scen = dir.join(SCENARIO_FILE);
    let summary = dir.join(SUMMARY_FILE);
    write_aggregate_csv(&agg, &report.aggregate)?;
    write_scenario_csv(&scen, &report.by_scenario)?;
    let json = serde_json::to_string_pretty(&report.summary)
        .map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
    Ok(vec![agg, scen, summary])
}
