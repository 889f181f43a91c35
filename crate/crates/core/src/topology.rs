//! Network graphs, probe sets and the probe/link measurement matrix.
//!
//! Nodes and links are stored 0-based. Everything user facing (edge-list
//! files, CLI output, error messages) is 1-based.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::LinkParams;

/// Attempts allowed when rejection-sampling a connected random graph.
pub const ER_MAX_RETRIES: usize = 1000;

const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopologyKind {
    Star,
    General,
}

/// Undirected, connected simple graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_count: usize,
    links: Vec<(usize, usize)>,
    kind: TopologyKind,
    hub: Option<usize>,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Topology {
    /// Validates endpoints, duplicates and connectivity, and classifies stars.
    pub fn new(node_count: usize, links: Vec<(usize, usize)>) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "topology needs at least 2 nodes, got {node_count}"
            )));
        }
        if links.is_empty() {
            return Err(Error::InvalidArgument("topology has no links".into()));
        }
        let mut seen = HashSet::new();
        let mut adjacency = vec![Vec::new(); node_count];
        for (idx, &(u, v)) in links.iter().enumerate() {
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "link {} has endpoint outside 1..={node_count}",
                    idx + 1
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!(
                    "link {} is a self loop on node {}",
                    idx + 1,
                    u + 1
                )));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate link {}-{}",
                    u + 1,
                    v + 1
                )));
            }
            adjacency[u].push((v, idx));
            adjacency[v].push((u, idx));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }

        let topo = Topology {
            node_count,
            hub: None,
            kind: TopologyKind::General,
            links,
            adjacency,
        };
        if let Some(node) = topo.first_unreachable() {
            return Err(Error::Disconnected(format!(
                "node {} is unreachable from node 1",
                node + 1
            )));
        }
        let hub = topo.find_hub();
        Ok(Topology {
            hub,
            kind: if hub.is_some() {
                TopologyKind::Star
            } else {
                TopologyKind::General
            },
            ..topo
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> &[(usize, usize)] {
        &self.links
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Centre node of a star.
    pub fn hub(&self) -> Option<usize> {
        self.hub
    }

    /// Sorted `(neighbor, link)` pairs of `node`.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    /// The non-hub endpoint of a star link.
    pub fn leaf_of(&self, link: usize) -> Option<usize> {
        let hub = self.hub?;
        let (u, v) = self.links[link];
        Some(if u == hub { v } else { u })
    }

    /// Serializes to the `u,v[,mu]` edge-list format.
    pub fn to_edge_list(&self, mu: Option<&LinkParams>) -> String {
        let mut out = String::new();
        for (idx, &(u, v)) in self.links.iter().enumerate() {
            match mu {
                Some(mu) => writeln!(out, "{},{},{}", u + 1, v + 1, mu.get(idx)),
                None => writeln!(out, "{},{}", u + 1, v + 1),
            }
            .expect("writing to a String cannot fail");
        }
        out
    }

    fn first_unreachable(&self) -> Option<usize> {
        let dist = self.bfs_distances(0);
        dist.iter().position(|d| d.is_none())
    }

    fn find_hub(&self) -> Option<usize> {
        let l = self.links.len();
        if l < 2 {
            return None;
        }
        (0..self.node_count).find(|&n| self.adjacency[n].len() == l)
    }

    /// Hop distances from `source`; `None` marks unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.node_count];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &(v, _) in &self.adjacency[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest path from `from` to `to` with the lexicographically smallest
    /// node sequence. Returns `(nodes, links)`.
    pub fn shortest_path(&self, from: usize, to: usize) -> Option<(Vec<usize>, Vec<usize>)> {
        let dist = self.bfs_distances(to);
        let mut d = dist[from]?;
        let mut nodes = vec![from];
        let mut links = Vec::with_capacity(d);
        let mut cur = from;
        while d > 0 {
            // adjacency is sorted, so the first hit is the smallest node id
            let &(next, link) = self.adjacency[cur]
                .iter()
                .find(|&&(v, _)| dist[v] == Some(d - 1))?;
            nodes.push(next);
            links.push(link);
            cur = next;
            d -= 1;
        }
        Some((nodes, links))
    }
}

/// Star with `links` leaves; node `links + 1` (1-based) is the hub and link
/// `l` joins leaf `l` to it.
pub fn build_star(links: usize) -> Result<Topology> {
    if links < 2 {
        return Err(Error::InvalidArgument(format!(
            "a star needs at least 2 links, got {links}"
        )));
    }
    let hub = links;
    Topology::new(links + 1, (0..links).map(|l| (l, hub)).collect())
}

/// Erdős–Rényi G(n, p), resampled until connected.
pub fn build_er(nodes: usize, edge_prob: f64, seed: u64) -> Result<Topology> {
    if nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "an ER graph needs at least 2 nodes, got {nodes}"
        )));
    }
    if !(edge_prob > 0.0 && edge_prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "edge probability must lie in (0, 1), got {edge_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ER_MAX_RETRIES {
        let mut links = Vec::new();
        for u in 0..nodes {
            for v in (u + 1)..nodes {
                if rng.random_bool(edge_prob) {
                    links.push((u, v));
                }
            }
        }
        if links.is_empty() {
            continue;
        }
        match Topology::new(nodes, links) {
            Ok(topo) => return Ok(topo),
            Err(Error::Disconnected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationFailure {
        nodes,
        edge_prob,
        retries: ER_MAX_RETRIES,
    })
}

/// Parses `u,v[,mu]` lines with 1-based node ids.
///
/// Blank lines and lines starting with `#` are skipped. Repeated undirected
/// edges are collapsed onto the first occurrence. The per-link parameters are
/// returned only if every line carries the third column.
pub fn load_edge_list(text: &str) -> Result<(Topology, Option<LinkParams>)> {
    let mut seen = HashSet::new();
    let mut links = Vec::new();
    let mut mu = Vec::new();
    let mut with_mu = 0usize;
    let mut max_node = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(format!(
                "expected `u,v[,mu]`, found {} fields",
                fields.len()
            )));
        }
        let node = |s: &str| -> Result<usize> {
            let id: usize = s
                .parse()
                .map_err(|_| parse_err(format!("invalid node id `{s}`")))?;
            if id == 0 {
                return Err(parse_err("node ids are 1-based".into()));
            }
            Ok(id - 1)
        };
        let (u, v) = (node(fields[0])?, node(fields[1])?);
        if u == v {
            return Err(parse_err(format!("self loop on node {}", u + 1)));
        }
        let value = match fields.get(2) {
            Some(s) => {
                let x: f64 = s
                    .parse()
                    .map_err(|_| parse_err(format!("invalid link parameter `{s}`")))?;
                Some(x)
            }
            None => None,
        };
        if !seen.insert((u.min(v), u.max(v))) {
            continue;
        }
        max_node = max_node.max(u + 1).max(v + 1);
        links.push((u, v));
        if let Some(x) = value {
            with_mu += 1;
            mu.push(x);
        }
    }

    if links.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "edge list is empty".into(),
        });
    }
    let topo = Topology::new(max_node, links)?;
    let params = match with_mu {
        0 => None,
        n if n == topo.link_count() => Some(LinkParams::new(mu)?),
        n => {
            return Err(Error::Parse {
                line: 0,
                message: format!(
                    "{n} of {} links carry a parameter; give all or none",
                    topo.link_count()
                ),
            })
        }
    };
    Ok((topo, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    Unicast,
    RiMulticast,
}

/// One probing experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    /// End-to-end send along a path.
    Unicast {
        nodes: Vec<usize>,
        links: Vec<usize>,
    },
    /// Root-independent multicast on a star: the leaf of `root_link` sends,
    /// every other leaf measures.
    RiMulticast {
        root_link: usize,
        destinations: Vec<usize>,
    },
}

impl Probe {
    pub fn mode(&self) -> ProbeMode {
        match self {
            Probe::Unicast { .. } => ProbeMode::Unicast,
            Probe::RiMulticast { .. } => ProbeMode::RiMulticast,
        }
    }

    pub fn destinations(&self) -> Vec<usize> {
        match self {
            Probe::Unicast { nodes, .. } => vec![*nodes.last().expect("path has nodes")],
            Probe::RiMulticast { destinations, .. } => destinations.clone(),
        }
    }

    /// Links whose state affects the probe outcome, in ascending order.
    pub fn observed_links(&self, link_count: usize) -> Vec<usize> {
        match self {
            Probe::Unicast { links, .. } => {
                let mut v = links.clone();
                v.sort_unstable();
                v
            }
            Probe::RiMulticast { root_link, .. } => {
                (0..link_count).filter(|l| l != root_link).collect()
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Probe::Unicast { nodes, links } => format!(
                "unicast {} via links [{}]",
                join(nodes.iter().map(|n| n + 1), "-"),
                join(links.iter().map(|l| l + 1), ",")
            ),
            Probe::RiMulticast {
                root_link,
                destinations,
            } => format!(
                "ri-multicast root link {} -> nodes [{}]",
                root_link + 1,
                join(destinations.iter().map(|n| n + 1), ",")
            ),
        }
    }
}

fn join(items: impl Iterator<Item = usize>, sep: &str) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

/// Binary probe × link incidence matrix together with its left inverse.
#[derive(Debug, Clone)]
pub struct MeasurementMatrix {
    q: DMatrix<f64>,
    kappa: DMatrix<f64>,
}

impl MeasurementMatrix {
    /// Fails unless `Q` has full column rank.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let (m, l) = q.shape();
        if m < l {
            return Err(Error::Identifiability {
                message: format!("{m} probes cannot identify {l} links"),
                links: unidentifiable_links(&q),
            });
        }
        let rank = q.rank(RANK_TOL);
        if rank < l {
            return Err(Error::Identifiability {
                message: format!("measurement matrix has rank {rank} < {l}"),
                links: unidentifiable_links(&q),
            });
        }
        let kappa = if m == l {
            q.clone().try_inverse().ok_or_else(|| Error::Identifiability {
                message: "square measurement matrix is singular".into(),
                links: unidentifiable_links(&q),
            })?
        } else {
            let gram = q.transpose() * &q;
            let chol = gram.cholesky().ok_or_else(|| Error::Identifiability {
                message: "Q^T Q is not positive definite".into(),
                links: unidentifiable_links(&q),
            })?;
            chol.solve(&q.transpose())
        };
        Ok(MeasurementMatrix { q, kappa })
    }

    pub fn from_rows(rows: &[Vec<usize>], link_count: usize) -> Result<Self> {
        let mut q = DMatrix::zeros(rows.len(), link_count);
        for (m, row) in rows.iter().enumerate() {
            for &l in row {
                q[(m, l)] = 1.0;
            }
        }
        Self::new(q)
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// `(QᵀQ)⁻¹Qᵀ`, which equals `Q⁻¹` for square `Q`. Shape L×M.
    pub fn kappa(&self) -> &DMatrix<f64> {
        &self.kappa
    }

    pub fn probe_count(&self) -> usize {
        self.q.nrows()
    }

    pub fn link_count(&self) -> usize {
        self.q.ncols()
    }

    pub fn is_square(&self) -> bool {
        self.q.nrows() == self.q.ncols()
    }

    pub fn rank(&self) -> usize {
        self.q.rank(RANK_TOL)
    }

    pub fn determinant(&self) -> Option<f64> {
        self.is_square().then(|| self.q.determinant())
    }
}

/// Links whose indicator vector is outside the row space of `q`.
fn unidentifiable_links(q: &DMatrix<f64>) -> Vec<usize> {
    let mut basis = RowBasis::new(q.ncols());
    for row in q.row_iter() {
        basis.insert(row.iter().copied().collect());
    }
    (0..q.ncols())
        .filter(|&l| {
            let mut e = vec![0.0; q.ncols()];
            e[l] = 1.0;
            !basis.contains(e)
        })
        .map(|l| l + 1)
        .collect()
}

/// Incrementally reduced row basis.
struct RowBasis {
    width: usize,
    rows: Vec<(usize, Vec<f64>)>,
}

impl RowBasis {
    fn new(width: usize) -> Self {
        RowBasis {
            width,
            rows: Vec::new(),
        }
    }

    fn rank(&self) -> usize {
        self.rows.len()
    }

    fn reduce(&self, mut v: Vec<f64>) -> Vec<f64> {
        for (pivot, row) in &self.rows {
            let f = v[*pivot];
            if f != 0.0 {
                for (x, r) in v.iter_mut().zip(row) {
                    *x -= f * r;
                }
            }
        }
        v
    }

    fn contains(&self, v: Vec<f64>) -> bool {
        self.reduce(v).iter().all(|x| x.abs() <= RANK_TOL)
    }

    /// Returns true if `v` increased the rank.
    fn insert(&mut self, v: Vec<f64>) -> bool {
        debug_assert_eq!(v.len(), self.width);
        let mut v = self.reduce(v);
        let Some(pivot) = (0..self.width)
            .filter(|&i| v[i].abs() > RANK_TOL)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        else {
            return false;
        };
        let p = v[pivot];
        v.iter_mut().for_each(|x| *x /= p);
        for (_, row) in &mut self.rows {
            let f = row[pivot];
            if f != 0.0 {
                for (r, x) in row.iter_mut().zip(&v) {
                    *r -= f * x;
                }
            }
        }
        self.rows.push((pivot, v));
        true
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSet {
    probes: Vec<Probe>,
    matrix: MeasurementMatrix,
    mode: ProbeMode,
}

impl ProbeSet {
    fn new(probes: Vec<Probe>, link_count: usize, mode: ProbeMode) -> Result<Self> {
        let rows: Vec<Vec<usize>> = probes.iter().map(|p| p.observed_links(link_count)).collect();
        let matrix = MeasurementMatrix::from_rows(&rows, link_count)?;
        Ok(ProbeSet {
            probes,
            matrix,
            mode,
        })
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn probe(&self, m: usize) -> &Probe {
        &self.probes[m]
    }

    pub fn matrix(&self) -> &MeasurementMatrix {
        &self.matrix
    }

    pub fn mode(&self) -> ProbeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn link_count(&self) -> usize {
        self.matrix.link_count()
    }
}

/// Link pairs of the canonical square unicast set on an `l`-link star:
/// the triangle `(1,2), (1,3), (2,3)` followed by the chain `(k, k+1)` for
/// `k = 3..l`. The probe graph over links is unicyclic with an odd cycle, so
/// `Q` is invertible with determinant ±2 for every `l >= 3`.
pub fn canonical_star_pairs(l: usize) -> Vec<(usize, usize)> {
    if l < 3 {
        return Vec::new();
    }
    let mut pairs = vec![(0, 1), (0, 2), (1, 2)];
    pairs.extend((2..l - 1).map(|k| (k, k + 1)));
    pairs
}

/// Square, invertible unicast probe set on a star (two links per probe).
pub fn canonical_star_unicast_probes(topo: &Topology) -> Result<ProbeSet> {
    let hub = star_hub(topo)?;
    let l = topo.link_count();
    if l < 3 {
        return Err(Error::Identifiability {
            message: format!("no invertible two-link unicast set exists on a {l}-link star"),
            links: (1..=l).collect(),
        });
    }
    let probes = canonical_star_pairs(l)
        .into_iter()
        .map(|(a, b)| {
            let (src, dst) = (topo.leaf_of(a).unwrap(), topo.leaf_of(b).unwrap());
            Probe::Unicast {
                nodes: vec![src, hub, dst],
                links: vec![a, b],
            }
        })
        .collect();
    ProbeSet::new(probes, l, ProbeMode::Unicast)
}

/// Shortest-path unicast probes between monitor pairs.
///
/// Pairs `(u, v)` with `u < v` are visited in lexicographic order; a path is
/// kept when it raises the rank of `Q`. After full rank is reached, remaining
/// paths are appended in the same order until `cap` probes exist (`None` keeps
/// `Q` square).
pub fn general_unicast_probes(
    topo: &Topology,
    monitors: &BTreeSet<usize>,
    cap: Option<usize>,
) -> Result<ProbeSet> {
    if monitors.is_empty() {
        return Err(Error::InvalidArgument("monitor set is empty".into()));
    }
    if let Some(&bad) = monitors.iter().find(|&&n| n >= topo.node_count()) {
        return Err(Error::InvalidArgument(format!(
            "monitor node {} is not in the topology",
            bad + 1
        )));
    }
    let l = topo.link_count();
    let cap = cap.unwrap_or(l).max(l);
    let mons: Vec<usize> = monitors.iter().copied().collect();

    let mut basis = RowBasis::new(l);
    let mut chosen = vec![];
    let mut spare = vec![];
    for (i, &u) in mons.iter().enumerate() {
        for &v in &mons[i + 1..] {
            let (nodes, links) = topo
                .shortest_path(u, v)
                .expect("topology is connected");
            let mut row = vec![0.0; l];
            for &link in &links {
                row[link] = 1.0;
            }
            let probe = Probe::Unicast { nodes, links };
            if basis.rank() < l && basis.insert(row) {
                chosen.push(probe);
            } else {
                spare.push(probe);
            }
        }
    }
    if basis.rank() < l {
        let missing: Vec<usize> = (0..l)
            .filter(|&link| {
                let mut e = vec![0.0; l];
                e[link] = 1.0;
                !basis.contains(e)
            })
            .map(|x| x + 1)
            .collect();
        return Err(Error::Identifiability {
            message: format!(
                "monitor paths reach rank {} < {l}; unidentifiable links {:?}",
                basis.rank(),
                missing
            ),
            links: missing,
        });
    }
    let extra = cap - chosen.len();
    chosen.extend(spare.into_iter().take(extra));
    ProbeSet::new(chosen, l, ProbeMode::Unicast)
}

/// One root-independent multicast probe per star link.
pub fn ri_multicast_probes(topo: &Topology) -> Result<ProbeSet> {
    star_hub(topo)?;
    let l = topo.link_count();
    let probes = (0..l)
        .map(|root| Probe::RiMulticast {
            root_link: root,
            destinations: (0..l)
                .filter(|&x| x != root)
                .map(|x| topo.leaf_of(x).unwrap())
                .collect(),
        })
        .collect();
    ProbeSet::new(probes, l, ProbeMode::RiMulticast)
}

fn star_hub(topo: &Topology) -> Result<usize> {
    match (topo.kind(), topo.hub()) {
        (TopologyKind::Star, Some(hub)) => Ok(hub),
        _ => Err(Error::UnsupportedTopology(
            "probe family requires a star topology".into(),
        )),
    }
}
