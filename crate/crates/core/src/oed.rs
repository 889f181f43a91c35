//! Fisher information, A-/D-optimality criteria and optimal allocations.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::{unicast_success_prob, LinkParams};
use crate::topology::{MeasurementMatrix, Probe, ProbeMode, ProbeSet};

/// Tolerance on `sum(phi) = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default lower bound on allocations inside the conditional-gradient solver.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// A point on the probe simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation(Vec<f64>);

impl Allocation {
    pub fn new(phi: Vec<f64>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::InvalidArgument("allocation is empty".into()));
        }
        if phi.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "allocation has a negative or non-finite entry: {phi:?}"
            )));
        }
        let sum: f64 = phi.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!(
                "allocation sums to {sum}, not 1"
            )));
        }
        Ok(Allocation(phi))
    }

    pub fn uniform(m: usize) -> Self {
        Allocation(vec![1.0 / m as f64; m])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    /// Trace of the inverse FIM.
    AOptimal,
    /// Reciprocal of the FIM determinant.
    DOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_FLOOR
}

impl CriterionSpec {
    pub fn a_optimal() -> Self {
        CriterionSpec {
            kind: CriterionKind::AOptimal,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn d_optimal() -> Self {
        CriterionSpec {
            kind: CriterionKind::DOptimal,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn validate(&self, probe_count: usize) -> Result<()> {
        if !(self.floor >= 0.0 && self.floor < 1.0 / probe_count as f64) {
            return Err(Error::Config(format!(
                "criterion floor {} must lie in [0, 1/M) with M = {probe_count}",
                self.floor
            )));
        }
        Ok(())
    }
}

/// Fisher information of a single probe with respect to `mu`.
///
/// Unicast: `nu/(1-nu) d dᵀ` with `d_l = Q_{m,l}/mu_l`. RI multicast:
/// `diag(1/(mu_l (1-mu_l)))` over the non-root links.
pub fn probe_fim(probe: &Probe, mu: &LinkParams) -> DMatrix<f64> {
    let l = mu.len();
    match probe {
        Probe::Unicast { .. } => {
            let nu = unicast_success_prob(probe, mu);
            let w = nu / (1.0 - nu);
            let mut d = nalgebra::DVector::zeros(l);
            for link in probe.observed_links(l) {
                d[link] = 1.0 / mu.get(link);
            }
            &d * d.transpose() * w
        }
        Probe::RiMulticast { .. } => {
            let mut fim = DMatrix::zeros(l, l);
            for link in probe.observed_links(l) {
                let x = mu.get(link);
                fim[(link, link)] = 1.0 / (x * (1.0 - x));
            }
            fim
        }
    }
}

pub fn probe_fims(probes: &ProbeSet, mu: &LinkParams) -> Vec<DMatrix<f64>> {
    probes.probes().iter().map(|p| probe_fim(p, mu)).collect()
}

/// `sum_m phi_m I_m`.
pub fn mix_fim(fims: &[DMatrix<f64>], phi: &[f64]) -> DMatrix<f64> {
    assert_eq!(fims.len(), phi.len(), "one weight per probe FIM");
    let l = fims.first().map_or(0, |f| f.nrows());
    fims.iter()
        .zip(phi)
        .fold(DMatrix::zeros(l, l), |acc, (f, &w)| acc + f * w)
}

/// Inverse of a positive-definite FIM, or `None` when it is numerically
/// singular.
fn spd_inverse(fim: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let scale = fim.diagonal().max();
    if !scale.is_finite() || scale <= 0.0 {
        return None;
    }
    let chol = fim.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let min_pivot = diag.iter().map(|x| x * x).fold(f64::INFINITY, f64::min);
    if min_pivot <= scale * 1e-13 {
        return None;
    }
    let log_det = 2.0 * diag.iter().map(|x| x.ln()).sum::<f64>();
    Some((chol.inverse(), log_det))
}

/// Generic criterion value through dense linear algebra; `+inf` when the
/// mixed FIM is singular.
pub fn generic_criterion(fims: &[DMatrix<f64>], phi: &[f64], kind: CriterionKind) -> f64 {
    match spd_inverse(&mix_fim(fims, phi)) {
        None => f64::INFINITY,
        Some((inv, log_det)) => match kind {
            CriterionKind::AOptimal => inv.trace(),
            CriterionKind::DOptimal => (-log_det).exp(),
        },
    }
}

/// `A_m = (1-nu_m)/nu_m sum_l mu_l^2 kappa_{l,m}^2` for a square measurement
/// matrix, so that `tr I⁻¹ = sum_m A_m / phi_m`.
pub fn unicast_a_weights(mu: &LinkParams, matrix: &MeasurementMatrix) -> Result<Vec<f64>> {
    if !matrix.is_square() {
        return Err(Error::Identifiability {
            message: "closed-form A-optimal weights need a square measurement matrix".into(),
            links: Vec::new(),
        });
    }
    let q = matrix.q();
    let kappa = matrix.kappa();
    Ok((0..matrix.probe_count())
        .map(|m| {
            let nu: f64 = (0..mu.len())
                .filter(|&l| q[(m, l)] != 0.0)
                .map(|l| mu.get(l))
                .product();
            let spread: f64 = (0..mu.len())
                .map(|l| (mu.get(l) * kappa[(l, m)]).powi(2))
                .sum();
            (1.0 - nu) / nu * spread
        })
        .collect())
}

/// `sum_m A_m / phi_m`.
pub fn square_unicast_a_criterion(weights: &[f64], phi: &[f64]) -> f64 {
    weights
        .iter()
        .zip(phi)
        .map(|(&a, &p)| {
            if a == 0.0 {
                0.0
            } else if p <= 0.0 {
                f64::INFINITY
            } else {
                a / p
            }
        })
        .sum()
}

/// `sum_l mu_l (1-mu_l) / (1 - phi_l)` for RI probes on a star.
pub fn quantum_star_a_criterion(mu: &LinkParams, phi: &[f64]) -> f64 {
    mu.values()
        .iter()
        .zip(phi)
        .map(|(&x, &p)| {
            let free = 1.0 - p;
            if free <= 0.0 {
                f64::INFINITY
            } else {
                x * (1.0 - x) / free
            }
        })
        .sum()
}

/// Criterion value, using a closed form when one applies.
pub fn criterion_value(
    mu: &LinkParams,
    phi: &[f64],
    probes: &ProbeSet,
    spec: &CriterionSpec,
) -> f64 {
    match (spec.kind, probes.mode()) {
        (CriterionKind::AOptimal, ProbeMode::RiMulticast) => quantum_star_a_criterion(mu, phi),
        (CriterionKind::AOptimal, ProbeMode::Unicast) if probes.matrix().is_square() => {
            match unicast_a_weights(mu, probes.matrix()) {
                Ok(w) => square_unicast_a_criterion(&w, phi),
                Err(_) => f64::INFINITY,
            }
        }
        _ => generic_criterion(&probe_fims(probes, mu), phi, spec.kind),
    }
}

/// `phi*_m = sqrt(A_m) / sum sqrt(A_m')` for a square unicast measurement
/// matrix.
pub fn star_a_optimal_allocation(mu: &LinkParams, matrix: &MeasurementMatrix) -> Result<Allocation> {
    let weights = unicast_a_weights(mu, matrix)?;
    if let Some(m) = weights.iter().position(|&a| !a.is_finite() || a <= 0.0) {
        return Err(Error::Internal(format!(
            "A-optimal weight of probe {} is {}",
            m + 1,
            weights[m]
        )));
    }
    let roots: Vec<f64> = weights.iter().map(|a| a.sqrt()).collect();
    let total: f64 = roots.iter().sum();
    Allocation::new(roots.into_iter().map(|r| r / total).collect())
}

/// A-optimal allocation for RI probes on a bit-flip star.
///
/// Links are dropped from the candidate set, largest `sqrt(mu(1-mu))` first
/// (lowest index on ties), until the remaining set admits a nonnegative
/// Lagrange solution.
pub fn quantum_a_optimal_allocation(mu: &LinkParams) -> Allocation {
    let s: Vec<f64> = mu.values().iter().map(|x| (x * (1.0 - x)).sqrt()).collect();
    let mut active: Vec<bool> = vec![true; s.len()];
    loop {
        let members = active.iter().filter(|&&a| a).count();
        let sum: f64 = s.iter().zip(&active).filter(|(_, &a)| a).map(|(x, _)| x).sum();
        let (arg, max) = s
            .iter()
            .enumerate()
            .filter(|(i, _)| active[*i])
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            });
        if members <= 1 || sum - (members as f64 - 1.0) * max >= 0.0 {
            let k = members as f64 - 1.0;
            let phi = s
                .iter()
                .zip(&active)
                .map(|(&x, &a)| if a { (sum - k * x) / sum } else { 0.0 })
                .collect();
            return Allocation(phi);
        }
        active[arg] = false;
    }
}

/// Fixed-budget conditional-gradient (Frank–Wolfe) minimisation over
/// `{phi in simplex : phi_m >= floor}`, started from the uniform point with
/// open-loop step `2/(k+2)`.
///
/// A-optimal descends `tr I⁻¹`; D-optimal descends `-log det I`, which has
/// the same minimiser as `1/det I`.
pub fn simplex_optimize(
    mu: &LinkParams,
    probes: &ProbeSet,
    spec: &CriterionSpec,
    iters: usize,
) -> Result<Allocation> {
    let m_count = probes.len();
    spec.validate(m_count)?;
    let fims = probe_fims(probes, mu);
    let mut phi = vec![1.0 / m_count as f64; m_count];
    if !generic_criterion(&fims, &phi, spec.kind).is_finite() {
        return Err(Error::Config(
            "criterion is infinite at the uniform allocation; probe set is not identifying".into(),
        ));
    }
    let top = 1.0 - (m_count as f64 - 1.0) * spec.floor;
    for k in 1..=iters {
        let Some((inv, _)) = spd_inverse(&mix_fim(&fims, &phi)) else {
            return Err(Error::Internal(format!(
                "FIM became singular at iteration {k}"
            )));
        };
        let kernel = match spec.kind {
            CriterionKind::AOptimal => &inv * &inv,
            CriterionKind::DOptimal => inv,
        };
        // gradient entry m is -<kernel, I_m>
        let best = fims
            .iter()
            .map(|f| -kernel.component_mul(f).sum())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("nonempty probe set");
        let step = 2.0 / (k as f64 + 2.0);
        for (i, x) in phi.iter_mut().enumerate() {
            let vertex = if i == best { top } else { spec.floor };
            *x += step * (vertex - *x);
        }
    }
    let total: f64 = phi.iter().sum();
    Allocation::new(phi.into_iter().map(|x| x / total).collect())
}

/// How a criterion minimiser is obtained for a given probe family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocator {
    /// `sqrt(A_m)` weights on a square unicast matrix.
    SquareUnicast,
    /// Elimination rule for RI probes on a bit-flip star.
    QuantumStar,
    /// Conditional gradient with a fixed iteration budget.
    ConditionalGradient { iters: usize },
}

impl Allocator {
    /// Closed forms for the A-optimal criterion, conditional gradient otherwise.
    pub fn select(probes: &ProbeSet, spec: &CriterionSpec, iters: usize) -> Self {
        match (spec.kind, probes.mode()) {
            (CriterionKind::AOptimal, ProbeMode::RiMulticast) => Allocator::QuantumStar,
            (CriterionKind::AOptimal, ProbeMode::Unicast) if probes.matrix().is_square() => {
                Allocator::SquareUnicast
            }
            _ => Allocator::ConditionalGradient { iters },
        }
    }

    pub fn allocate(
        &self,
        mu: &LinkParams,
        probes: &ProbeSet,
        spec: &CriterionSpec,
    ) -> Result<Allocation> {
        match *self {
            Allocator::SquareUnicast => star_a_optimal_allocation(mu, probes.matrix()),
            Allocator::QuantumStar => Ok(quantum_a_optimal_allocation(mu)),
            Allocator::ConditionalGradient { iters } => simplex_optimize(mu, probes, spec, iters),
        }
    }
}
