//! Monte Carlo runner, metrics and persistence.
//!
//! Every (scenario, run, policy) cell owns its random stream, so cells run
//! in any order on any number of threads and the artifacts depend only on
//! the config and its master seed.

mod config;
mod report;
mod runner;

pub use config::{
    reference_allocation, MuSource, ProbeSetSpec, Scenario, SimConfig, TopologySpec,
    REFERENCE_ITERS,
};
pub use report::{
    aggregate, fit_regret_slope, mean_std, read_aggregate_csv, write_aggregate_csv,
    write_report, write_scenario_csv, AggregateRow, MetricStats, PolicySummary, Report,
    ScenarioRow, Summary, AGGREGATE_FILE, AGGREGATE_HEADER, SCENARIO_FILE, SUMMARY_FILE,
};
pub use runner::{build_policy, recorded_times, run_cells, run_once, RunSeries};

use crate::error::Result;

/// Runs every cell and aggregates; writes artifacts when the config names
/// an output directory.
pub fn run_experiment(config: &SimConfig) -> Result<Report> {
    let (_, series) = run_cells(config)?;
    let report = aggregate(config, &series);
    if let Some(dir) = &config.output {
        write_report(dir, &report)?;
    }
    Ok(report)
}
