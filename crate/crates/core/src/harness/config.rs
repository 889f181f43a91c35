use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oed::{CriterionSpec, Allocator};
use crate::policies::PolicyConfig;
use crate::probes::{LinkParams, RngStream, StreamKey};
use crate::topology::{
    build_er, build_star, canonical_star_unicast_probes, general_unicast_probes,
    load_edge_list, ri_multicast_probes, ProbeMode, ProbeSet, Topology, TopologyKind,
};

/// Iteration budget of the reference conditional-gradient solve used for the
/// ground-truth allocation when no closed form applies.
pub const REFERENCE_ITERS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySpec {
    Star {
        links: usize,
    },
    /// A fresh graph per scenario unless `seed` pins one.
    Er {
        nodes: usize,
        edge_prob: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    EdgeList {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum MuSource {
    /// Independent draws per link and scenario.
    Uniform { low: f64, high: f64 },
    /// Third column of the edge-list file.
    File,
    Fixed { values: Vec<f64> },
}

impl MuSource {
    pub fn default_for(mode: ProbeMode) -> Self {
        match mode {
            ProbeMode::Unicast => MuSource::Uniform { low: 0.1, high: 0.9 },
            ProbeMode::RiMulticast => MuSource::Uniform { low: 0.1, high: 1.0 },
        }
    }
}

/// Unicast probe selection on general graphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSetSpec {
    /// 1-based monitor nodes; every node when absent.
    #[serde(default)]
    pub monitors: Option<Vec<usize>>,
    /// Probe budget; `Q` stays square when absent.
    #[serde(default)]
    pub cap: Option<usize>,
}

fn default_probe_mode() -> ProbeMode {
    ProbeMode::Unicast
}

fn default_one() -> usize {
    1
}

fn default_optimizer_iters() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    pub horizon: u64,
    #[serde(default = "default_one")]
    pub mc_runs: usize,
    #[serde(default = "default_one")]
    pub scenarios: usize,
    #[serde(default = "default_probe_mode")]
    pub probe_mode: ProbeMode,
    pub topology: TopologySpec,
    #[serde(default)]
    pub probe_set: ProbeSetSpec,
    #[serde(default)]
    pub mu: Option<MuSource>,
    #[serde(default = "CriterionSpec::a_optimal")]
    pub criterion: CriterionSpec,
    pub policies: Vec<PolicyConfig>,
    /// Defaults to `max(1, T / 500)`.
    #[serde(default)]
    pub metric_stride: Option<u64>,
    /// Output directory for the CSV and JSON artifacts.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Conditional-gradient budget used inside policies.
    #[serde(default = "default_optimizer_iters")]
    pub optimizer_iters: usize,
}

impl SimConfig {
    /// Parses a TOML document; relative edge-list paths resolve against
    /// `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let (Some(base), TopologySpec::EdgeList { path }) = (base, &mut cfg.topology) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn stride(&self) -> u64 {
        self.metric_stride.unwrap_or((self.horizon / 500).max(1))
    }

    pub fn mu_source(&self) -> MuSource {
        self.mu
            .clone()
            .unwrap_or_else(|| MuSource::default_for(self.probe_mode))
    }

    /// Checks that do not need a built scenario.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.mc_runs == 0 || self.scenarios == 0 {
            return Err(Error::Config("mc_runs and scenarios must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies configured".into()));
        }
        if self.metric_stride == Some(0) {
            return Err(Error::Config("metric_stride must be positive".into()));
        }
        if self.optimizer_iters == 0 {
            return Err(Error::Config("optimizer_iters must be positive".into()));
        }
        let mut labels = BTreeSet::new();
        for p in &self.policies {
            if !labels.insert(p.label()) {
                return Err(Error::Config(format!("duplicate policy label {}", p.label())));
            }
        }
        match self.mu_source() {
            MuSource::Uniform { low, high } => {
                if !(low > 0.0 && low < high && high <= 1.0) {
                    return Err(Error::Config(format!(
                        "uniform mu range needs 0 < low < high <= 1, got ({low}, {high})"
                    )));
                }
            }
            MuSource::File => {
                if !matches!(self.topology, TopologySpec::EdgeList { .. }) {
                    return Err(Error::Config(
                        "mu source \"file\" needs an edge_list topology".into(),
                    ));
                }
            }
            MuSource::Fixed { .. } => {}
        }
        Ok(())
    }

    /// Builds scenario `id`: topology, probe set, true parameters and the
    /// reference allocation.
    pub fn scenario(&self, id: usize) -> Result<Scenario> {
        let mut stream = RngStream::new(StreamKey {
            master: self.seed,
            scenario: id as u64,
            run: u64::MAX,
            policy: u64::MAX,
        });
        let (topology, file_mu) = match &self.topology {
            TopologySpec::Star { links } => (build_star(*links)?, None),
            TopologySpec::Er {
                nodes,
                edge_prob,
                seed,
            } => {
                let graph_seed = seed.unwrap_or_else(|| stream.next_u64());
                (build_er(*nodes, *edge_prob, graph_seed)?, None)
            }
            TopologySpec::EdgeList { path } => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                load_edge_list(&text)?
            }
        };
        let probes = self.probe_set_for(&topology)?;
        let l = topology.link_count();
        let mu = match self.mu_source() {
            MuSource::Uniform { low, high } => {
                // the upper end is open so parameters stay inside (0, 1)
                let v = (0..l).map(|_| stream.random_range(low..high)).collect();
                LinkParams::new(v)?
            }
            MuSource::File => file_mu.ok_or_else(|| {
                Error::Config("edge-list file has no mu column".into())
            })?,
            MuSource::Fixed { values } => {
                if values.len() != l {
                    return Err(Error::Config(format!(
                        "fixed mu has {} entries for {l} links",
                        values.len()
                    )));
                }
                LinkParams::new(values).map_err(|e| Error::Config(e.to_string()))?
            }
        };
        if self.horizon < probes.len() as u64 {
            return Err(Error::Config(format!(
                "horizon {} is shorter than the {} probes",
                self.horizon,
                probes.len()
            )));
        }
        self.criterion.validate(probes.len())?;
        for p in &self.policies {
            p.validate(self.horizon, probes.len())?;
        }
        let phi_star = reference_allocation(&mu, &probes, &self.criterion)?;
        Ok(Scenario {
            id,
            topology,
            probes,
            mu,
            phi_star,
        })
    }

    pub fn probe_set_for(&self, topology: &Topology) -> Result<ProbeSet> {
        match self.probe_mode {
            ProbeMode::RiMulticast => ri_multicast_probes(topology),
            ProbeMode::Unicast => {
                let spec = &self.probe_set;
                let plain = spec.monitors.is_none() && spec.cap.is_none();
                if topology.kind() == TopologyKind::Star && plain {
                    return canonical_star_unicast_probes(topology);
                }
                let monitors: BTreeSet<usize> = match &spec.monitors {
                    None => (0..topology.node_count()).collect(),
                    Some(list) => {
                        if let Some(&bad) = list.iter().find(|&&n| n == 0) {
                            return Err(Error::Config(format!(
                                "monitor ids are 1-based, got {bad}"
                            )));
                        }
                        list.iter().map(|n| n - 1).collect()
                    }
                };
                general_unicast_probes(topology, &monitors, spec.cap)
            }
        }
    }
}

/// Ground-truth allocation: the closed form when one applies, otherwise a
/// long conditional-gradient solve.
pub fn reference_allocation(
    mu: &LinkParams,
    probes: &ProbeSet,
    criterion: &CriterionSpec,
) -> Result<Vec<f64>> {
    Ok(Allocator::select(probes, criterion, REFERENCE_ITERS)
        .allocate(mu, probes, criterion)?
        .into_inner())
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: usize,
    pub topology: Topology,
    pub probes: ProbeSet,
    pub mu: LinkParams,
    pub phi_star: Vec<f64>,
}
