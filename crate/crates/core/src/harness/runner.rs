use rayon::prelude::*;

use crate::error::Result;
use crate::estimators::MleConfig;
use crate::oed::criterion_value;
use crate::policies::{
    resolve_xi, IterativePolicy, OpalPolicy, OraclePolicy, Planner, Policy, PolicyConfig,
    PolicyKind, UniformPolicy,
};
use crate::probes::{sample, RngStream, StreamKey, TallyState};

use super::config::{Scenario, SimConfig};

/// Metric trajectory of one (scenario, run, policy) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSeries {
    pub policy: String,
    pub scenario: usize,
    pub run: usize,
    pub t: Vec<u64>,
    pub regret: Vec<f64>,
    pub dist_actual: Vec<f64>,
    pub dist_estimated: Vec<f64>,
    pub mse: Vec<f64>,
    /// Final per-probe sample counts.
    pub counts: Vec<u64>,
    pub allocator_calls: usize,
}

/// Recorded time points: multiples of `stride`, plus `horizon` itself.
pub fn recorded_times(horizon: u64, stride: u64) -> Vec<u64> {
    let mut ts: Vec<u64> = (1..=horizon / stride).map(|k| k * stride).collect();
    if ts.last() != Some(&horizon) {
        ts.push(horizon);
    }
    ts
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn build_policy<'a>(
    cfg: &PolicyConfig,
    scenario: &Scenario,
    planner: Planner<'a>,
    horizon: u64,
) -> Result<Box<dyn Policy + 'a>> {
    let m = scenario.probes.len();
    Ok(match cfg.kind {
        PolicyKind::Opal => {
            let (_, initial) = resolve_xi(cfg.xi, horizon, m)?;
            Box::new(OpalPolicy::new(planner, initial, None))
        }
        PolicyKind::OpalLazy => {
            let (_, initial) = resolve_xi(cfg.xi, horizon, m)?;
            Box::new(OpalPolicy::new(planner, initial, Some(cfg.lazy_batch)))
        }
        PolicyKind::Uniform => Box::new(UniformPolicy::new(m)),
        PolicyKind::Oracle => Box::new(OraclePolicy::new(scenario.phi_star.clone())),
        PolicyKind::Iterative => Box::new(IterativePolicy::new(planner, cfg.iter_batch)),
    })
}

/// Runs policy `policy` of `config` for `T` rounds on `scenario`.
pub fn run_once(
    config: &SimConfig,
    scenario: &Scenario,
    run: usize,
    policy: usize,
) -> Result<RunSeries> {
    let pcfg = &config.policies[policy];
    let probes = &scenario.probes;
    let mu = &scenario.mu;
    let horizon = config.horizon;
    let planner = Planner::new(
        probes,
        config.criterion,
        MleConfig::for_horizon(probes.link_count(), horizon),
        config.optimizer_iters,
    );
    let metrics = planner.clone();
    let mut rule = build_policy(pcfg, scenario, planner, horizon)?;
    let mut rng = RngStream::new(StreamKey {
        master: config.seed,
        scenario: scenario.id as u64,
        run: run as u64,
        policy: policy as u64,
    });
    let f_star = criterion_value(mu, &scenario.phi_star, probes, &config.criterion);
    let times = recorded_times(horizon, config.stride());
    let mut series = RunSeries {
        policy: pcfg.label(),
        scenario: scenario.id,
        run,
        t: Vec::with_capacity(times.len()),
        regret: Vec::with_capacity(times.len()),
        dist_actual: Vec::with_capacity(times.len()),
        dist_estimated: Vec::with_capacity(times.len()),
        mse: Vec::with_capacity(times.len()),
        counts: Vec::new(),
        allocator_calls: 0,
    };

    let mut tally = TallyState::for_probes(probes);
    let mut next = times.iter().copied().peekable();
    for t in 1..=horizon {
        let m = rule.select(t, &tally, &mut rng);
        let outcome = sample(probes.probe(m), mu, &mut rng);
        tally.record(probes, m, &outcome)?;
        if next.peek() != Some(&t) {
            continue;
        }
        next.next();
        let phi_t = tally.empirical_allocation();
        let f_t = criterion_value(mu, &phi_t, probes, &config.criterion);
        let regret = if f_t.is_finite() { f_t - f_star } else { f64::INFINITY };
        let estimate = metrics.estimate(&tally).ok();
        let phi_hat = match rule.estimated_allocation() {
            Some(phi) => Some(phi.to_vec()),
            None => estimate
                .as_ref()
                .and_then(|e| metrics.optimal_allocation(&e.mu_hat).ok()),
        };
        series.t.push(t);
        series.regret.push(regret);
        series.dist_actual.push(l2(&scenario.phi_star, &phi_t));
        series.dist_estimated.push(
            phi_hat.map_or(f64::INFINITY, |p| l2(&scenario.phi_star, &p)),
        );
        series.mse.push(estimate.map_or(f64::INFINITY, |e| {
            e.mu_hat
                .iter()
                .zip(mu.values())
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        }));
    }
    series.counts = tally.counts().to_vec();
    series.allocator_calls = rule.allocator_calls();
    Ok(series)
}

/// Builds every scenario and runs all cells, in parallel. Output order is
/// scenario-major, then run, then policy, independent of scheduling.
pub fn run_cells(config: &SimConfig) -> Result<(Vec<Scenario>, Vec<RunSeries>)> {
    config.validate()?;
    let scenarios = (0..config.scenarios)
        .map(|s| config.scenario(s))
        .collect::<Result<Vec<_>>>()?;
    let (runs, pols) = (config.mc_runs, config.policies.len());
    let series = (0..scenarios.len() * runs * pols)
        .into_par_iter()
        .map(|i| {
            let s = i / (runs * pols);
            let r = (i / pols) % runs;
            let p = i % pols;
            run_once(config, &scenarios[s], r, p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scenarios, series))
}
