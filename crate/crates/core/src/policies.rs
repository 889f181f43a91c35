//! Online probe-selection rules.
//!
//! Time steps `t` are 1-based. When a policy is asked for the probe of step
//! `t`, the tally holds the `t - 1` completed rounds.

use std::fmt;

use rand::Rng;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::estimators::{estimate, Estimate, MleConfig};
use crate::oed::{Allocator, CriterionSpec};
use crate::probes::{LinkParams, RngStream, TallyState};
use crate::topology::ProbeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Opal,
    OpalLazy,
    Uniform,
    Oracle,
    Iterative,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Opal => "opal",
            PolicyKind::OpalLazy => "opal_lazy",
            PolicyKind::Uniform => "uniform",
            PolicyKind::Oracle => "oracle",
            PolicyKind::Iterative => "iterative",
        }
    }
}

/// Length of the forced initial phase: a fraction of the horizon, or the
/// `T^(-1/3)` schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XiSetting {
    Fraction(f64),
    CubeRootSchedule,
}

const CUBE_ROOT_TOKEN: &str = "T^(-1/3)";

impl Default for XiSetting {
    fn default() -> Self {
        XiSetting::Fraction(0.1)
    }
}

impl fmt::Display for XiSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            XiSetting::Fraction(c) => write!(f, "{c}"),
            XiSetting::CubeRootSchedule => f.write_str(CUBE_ROOT_TOKEN),
        }
    }
}

impl Serialize for XiSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            XiSetting::Fraction(c) => s.serialize_f64(*c),
            XiSetting::CubeRootSchedule => s.serialize_str(CUBE_ROOT_TOKEN),
        }
    }
}

impl<'de> Deserialize<'de> for XiSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Token(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) => Ok(XiSetting::Fraction(c)),
            Raw::Token(t) if t.replace(' ', "") == CUBE_ROOT_TOKEN => {
                Ok(XiSetting::CubeRootSchedule)
            }
            Raw::Token(t) => Err(de::Error::custom(format!(
                "xi must be a number or \"{CUBE_ROOT_TOKEN}\", got \"{t}\""
            ))),
        }
    }
}

fn default_batch() -> usize {
    100
}

fn default_lazy() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Column label in outputs; defaults to the kind name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub xi: XiSetting,
    /// Refresh period of OPAL-lazy.
    #[serde(default = "default_lazy")]
    pub lazy_batch: usize,
    /// Batch length of the iterative baseline.
    #[serde(default = "default_batch")]
    pub iter_batch: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            label: None,
            xi: XiSetting::default(),
            lazy_batch: default_lazy(),
            iter_batch: default_batch(),
        }
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| match self.kind {
                PolicyKind::OpalLazy => format!("opal_lazy_b{}", self.lazy_batch),
                k => k.name().to_string(),
            })
    }

    pub fn validate(&self, horizon: u64, probe_count: usize) -> Result<()> {
        if self.lazy_batch == 0 || self.iter_batch == 0 {
            return Err(Error::Config(format!(
                "policy {}: batch sizes must be positive",
                self.label()
            )));
        }
        if matches!(self.kind, PolicyKind::Opal | PolicyKind::OpalLazy) {
            resolve_xi(self.xi, horizon, probe_count)?;
        }
        Ok(())
    }
}

/// Initial-phase fraction and per-probe forced sample counts.
///
/// `T0 = round(xi T)` is split evenly; the first `T0 mod M` probes take one
/// extra sample.
pub fn resolve_xi(setting: XiSetting, horizon: u64, probe_count: usize) -> Result<(f64, Vec<u64>)> {
    let t = horizon as f64;
    let xi = match setting {
        XiSetting::Fraction(c) => c,
        XiSetting::CubeRootSchedule => t.powf(-1.0 / 3.0),
    };
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::Config(format!("xi must lie in [0, 1), got {xi}")));
    }
    let total = (xi * t).round() as u64;
    if total >= horizon && horizon > 0 {
        return Err(Error::Config(format!(
            "initial phase of {total} rounds does not fit in horizon {horizon}"
        )));
    }
    let m = probe_count as u64;
    let per = (0..m)
        .map(|i| total / m + u64::from(i < total % m))
        .collect();
    Ok((xi, per))
}

/// Largest deficit `target_m - S_m / t`; ties go to the smaller count, then
/// the lower index.
pub fn chase(target: &[f64], counts: &[u64], t: u64) -> usize {
    let t = t as f64;
    let mut best = 0;
    let mut best_gap = f64::NEG_INFINITY;
    for (m, (&phi, &s)) in target.iter().zip(counts).enumerate() {
        let gap = phi - s as f64 / t;
        if gap > best_gap || (gap == best_gap && s < counts[best]) {
            best = m;
            best_gap = gap;
        }
    }
    best
}

/// Round robin: `(t - 1) mod M`.
pub fn uniform_step(t: u64, probe_count: usize) -> usize {
    ((t - 1) % probe_count as u64) as usize
}

/// Tracks a known allocation.
pub fn oracle_step(t: u64, phi_star: &[f64], counts: &[u64]) -> usize {
    chase(phi_star, counts, t)
}

fn least_sampled(counts: &[u64]) -> usize {
    counts
        .iter()
        .enumerate()
        .min_by_key(|&(i, &s)| (s, i))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Estimator plus allocator for one probe family.
#[derive(Debug, Clone)]
pub struct Planner<'a> {
    pub probes: &'a ProbeSet,
    pub criterion: CriterionSpec,
    pub mle: MleConfig,
    pub allocator: Allocator,
}

impl<'a> Planner<'a> {
    pub fn new(probes: &'a ProbeSet, criterion: CriterionSpec, mle: MleConfig, iters: usize) -> Self {
        Planner {
            probes,
            criterion,
            mle,
            allocator: Allocator::select(probes, &criterion, iters),
        }
    }

    pub fn estimate(&self, tally: &TallyState) -> Result<Estimate> {
        estimate(tally, self.probes, &self.mle)
    }

    pub fn optimal_allocation(&self, mu: &[f64]) -> Result<Vec<f64>> {
        let mu = LinkParams::new(mu.to_vec())?;
        Ok(self
            .allocator
            .allocate(&mu, self.probes, &self.criterion)?
            .into_inner())
    }

    /// Estimate, then the allocation it implies.
    pub fn plan(&self, tally: &TallyState) -> Result<(Estimate, Vec<f64>)> {
        let est = self.estimate(tally)?;
        let phi = self.optimal_allocation(&est.mu_hat)?;
        Ok((est, phi))
    }
}

pub trait Policy {
    /// Probe index to perform at step `t`.
    fn select(&mut self, t: u64, tally: &TallyState, rng: &mut RngStream) -> usize;

    /// Current estimated-optimal allocation, if the policy keeps one.
    fn estimated_allocation(&self) -> Option<&[f64]> {
        None
    }

    /// Number of estimate-and-allocate refreshes so far.
    fn allocator_calls(&self) -> usize {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Chasing,
}

/// OPAL; with `refresh_every = Some(B)` it is OPAL-lazy.
pub struct OpalPolicy<'a> {
    planner: Planner<'a>,
    initial: Vec<u64>,
    refresh_every: Option<u64>,
    phi_hat: Option<Vec<f64>>,
    mu_hat: Option<Estimate>,
    calls: usize,
    last_refresh: u64,
}

impl<'a> OpalPolicy<'a> {
    pub fn new(planner: Planner<'a>, initial: Vec<u64>, refresh_every: Option<usize>) -> Self {
        OpalPolicy {
            planner,
            initial,
            refresh_every: refresh_every.map(|b| b.max(1) as u64),
            phi_hat: None,
            mu_hat: None,
            calls: 0,
            last_refresh: 0,
        }
    }

    pub fn phase(&self, tally: &TallyState) -> Phase {
        if tally.counts().iter().zip(&self.initial).any(|(s, s0)| s < s0) {
            Phase::Initial
        } else {
            Phase::Chasing
        }
    }

    pub fn estimate(&self) -> Option<&Estimate> {
        self.mu_hat.as_ref()
    }

    pub fn last_refresh(&self) -> u64 {
        self.last_refresh
    }

    fn due(&self, t: u64) -> bool {
        match self.refresh_every {
            None => true,
            Some(b) => self.phi_hat.is_none() || t % b == 1 % b,
        }
    }
}

impl Policy for OpalPolicy<'_> {
    fn select(&mut self, t: u64, tally: &TallyState, rng: &mut RngStream) -> usize {
        let counts = tally.counts();
        if self.phase(tally) == Phase::Initial {
            let open: Vec<usize> = (0..counts.len())
                .filter(|&m| counts[m] < self.initial[m])
                .collect();
            return open[rng.random_range(0..open.len())];
        }
        if self.due(t) {
            match self.planner.plan(tally) {
                Ok((est, phi)) => {
                    self.mu_hat = Some(est);
                    self.phi_hat = Some(phi);
                    self.calls += 1;
                    self.last_refresh = t;
                }
                Err(_) => return least_sampled(counts),
            }
        }
        match &self.phi_hat {
            Some(phi) => chase(phi, counts, t),
            None => least_sampled(counts),
        }
    }

    fn estimated_allocation(&self) -> Option<&[f64]> {
        self.phi_hat.as_deref()
    }

    fn allocator_calls(&self) -> usize {
        self.calls
    }
}

pub struct UniformPolicy {
    probe_count: usize,
}

impl UniformPolicy {
    pub fn new(probe_count: usize) -> Self {
        UniformPolicy { probe_count }
    }
}

impl Policy for UniformPolicy {
    fn select(&mut self, t: u64, _tally: &TallyState, _rng: &mut RngStream) -> usize {
        uniform_step(t, self.probe_count)
    }
}

/// Chases the true optimal allocation.
pub struct OraclePolicy {
    phi_star: Vec<f64>,
}

impl OraclePolicy {
    pub fn new(phi_star: Vec<f64>) -> Self {
        OraclePolicy { phi_star }
    }
}

impl Policy for OraclePolicy {
    fn select(&mut self, t: u64, tally: &TallyState, _rng: &mut RngStream) -> usize {
        oracle_step(t, &self.phi_star, tally.counts())
    }

    fn estimated_allocation(&self) -> Option<&[f64]> {
        Some(&self.phi_star)
    }
}

/// Batched baseline: every `batch` steps re-estimate and re-optimise, then
/// draw probes i.i.d. from the plan until the next refresh. The first batch
/// is uniform; a failed refresh keeps the previous plan.
pub struct IterativePolicy<'a> {
    planner: Planner<'a>,
    batch: u64,
    phi_hat: Vec<f64>,
    cumulative: Vec<f64>,
    calls: usize,
}

impl<'a> IterativePolicy<'a> {
    pub fn new(planner: Planner<'a>, batch: usize) -> Self {
        let m = planner.probes.len();
        let mut p = IterativePolicy {
            planner,
            batch: batch.max(1) as u64,
            phi_hat: vec![1.0 / m as f64; m],
            cumulative: Vec::new(),
            calls: 0,
        };
        p.rebuild_cdf();
        p
    }

    fn rebuild_cdf(&mut self) {
        let mut acc = 0.0;
        self.cumulative = self
            .phi_hat
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
    }

    fn draw(&self, rng: &mut RngStream) -> usize {
        let total = *self.cumulative.last().expect("nonempty plan");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

impl Policy for IterativePolicy<'_> {
    fn select(&mut self, t: u64, tally: &TallyState, rng: &mut RngStream) -> usize {
        if (t - 1).is_multiple_of(self.batch) {
            self.calls += 1;
            if t > 1 {
                if let Ok((_, phi)) = self.planner.plan(tally) {
                    self.phi_hat = phi;
                    self.rebuild_cdf();
                }
            }
        }
        self.draw(rng)
    }

    fn estimated_allocation(&self) -> Option<&[f64]> {
        Some(&self.phi_hat)
    }

    /// Batches planned, the uniform cold start included.
    fn allocator_calls(&self) -> usize {
        self.calls
    }
}
