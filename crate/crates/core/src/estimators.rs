//! Maximum-likelihood link estimates and their confidence radii.
//!
//! Unicast estimates work in the log domain: `log nu = Q log mu`, so the MLE
//! is `mu_hat = exp(kappa log nu_hat)` with `kappa` the (pseudo-)inverse of
//! `Q`. RI multicast estimates pool the Bernoulli observations of each link
//! over every probe not rooted at it.

use crate::error::{Error, Result};
use crate::probes::TallyState;
use crate::topology::{MeasurementMatrix, ProbeMode, ProbeSet};

/// Default clipping margin for probabilities.
pub const DEFAULT_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    /// `(successes + 1/2) / (trials + 1)`.
    AddHalf,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleConfig {
    pub smoothing: Smoothing,
    pub clip: f64,
    /// Confidence parameter for the radii.
    pub delta: f64,
}

impl MleConfig {
    /// Add-half smoothing, `1e-6` clipping and `delta = 1 / (L T^2)`.
    pub fn for_horizon(link_count: usize, horizon: u64) -> Self {
        let t = horizon.max(1) as f64;
        MleConfig {
            smoothing: Smoothing::AddHalf,
            clip: DEFAULT_CLIP,
            delta: 1.0 / (link_count as f64 * t * t),
        }
    }
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            smoothing: Smoothing::AddHalf,
            clip: DEFAULT_CLIP,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mu_hat: Vec<f64>,
    pub radii: Vec<f64>,
    pub delta: f64,
}

fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(eps, 1.0 - eps)
}

fn smoothed_rate(hits: u64, trials: u64, smoothing: Smoothing) -> f64 {
    match smoothing {
        Smoothing::AddHalf => (hits as f64 + 0.5) / (trials as f64 + 1.0),
        Smoothing::None => hits as f64 / trials as f64,
    }
}

/// Success rate of unicast probe `m`.
pub fn probe_rate_mle(tally: &TallyState, m: usize, cfg: &MleConfig) -> Result<f64> {
    let s = tally.count(m);
    if s == 0 {
        return Err(Error::InsufficientData(format!("probe {} never sampled", m + 1)));
    }
    Ok(clip(
        smoothed_rate(tally.successes()[m], s, cfg.smoothing),
        cfg.clip,
    ))
}

/// `exp(kappa log nu)`, clipped element-wise.
pub fn link_mle_from_rates(nu_hat: &[f64], matrix: &MeasurementMatrix, eps: f64) -> Vec<f64> {
    let kappa = matrix.kappa();
    let log_nu: Vec<f64> = nu_hat.iter().map(|v| v.ln()).collect();
    (0..kappa.nrows())
        .map(|l| {
            let s: f64 = kappa
                .row(l)
                .iter()
                .zip(&log_nu)
                .map(|(k, v)| k * v)
                .sum();
            clip(s.exp(), eps)
        })
        .collect()
}

fn probe_rates(tally: &TallyState, cfg: &MleConfig) -> Result<Vec<f64>> {
    (0..tally.probe_count())
        .map(|m| probe_rate_mle(tally, m, cfg))
        .collect()
}

/// Unicast MLE on a square, invertible measurement matrix.
pub fn star_link_mle(
    tally: &TallyState,
    matrix: &MeasurementMatrix,
    cfg: &MleConfig,
) -> Result<Estimate> {
    if !matrix.is_square() {
        return Err(Error::Identifiability {
            message: "closed-form inversion needs a square measurement matrix".into(),
            links: Vec::new(),
        });
    }
    general_link_mle(tally, matrix, cfg)
}

/// Unicast MLE through the least-squares left inverse `(QᵀQ)⁻¹Qᵀ`.
pub fn general_link_mle(
    tally: &TallyState,
    matrix: &MeasurementMatrix,
    cfg: &MleConfig,
) -> Result<Estimate> {
    let nu = probe_rates(tally, cfg)?;
    let mu_hat = link_mle_from_rates(&nu, matrix, cfg.clip);
    let radii = confidence_radii(tally, matrix, cfg.delta, ProbeMode::Unicast)?;
    Ok(Estimate {
        mu_hat,
        radii,
        delta: cfg.delta,
    })
}

/// Pooled no-flip frequency of each link over the probes not rooted at it.
pub fn ri_link_mle(tally: &TallyState, cfg: &MleConfig) -> Result<Estimate> {
    let l_count = tally.link_count();
    let mut mu_hat = Vec::with_capacity(l_count);
    for l in 0..l_count {
        let (hits, trials) = (0..tally.probe_count())
            .filter(|&m| m != l)
            .fold((0u64, 0u64), |(a, s), m| {
                (a + tally.no_flip(m, l), s + tally.count(m))
            });
        if trials == 0 {
            return Err(Error::InsufficientData(format!(
                "link {} has not been observed",
                l + 1
            )));
        }
        mu_hat.push(clip(smoothed_rate(hits, trials, cfg.smoothing), cfg.clip));
    }
    Ok(Estimate {
        mu_hat,
        radii: ri_radii(tally, cfg.delta),
        delta: cfg.delta,
    })
}

/// Dispatches on the probe family.
pub fn estimate(tally: &TallyState, probes: &ProbeSet, cfg: &MleConfig) -> Result<Estimate> {
    match probes.mode() {
        ProbeMode::Unicast => general_link_mle(tally, probes.matrix(), cfg),
        ProbeMode::RiMulticast => ri_link_mle(tally, cfg),
    }
}

fn ri_radii(tally: &TallyState, delta: f64) -> Vec<f64> {
    let total: u64 = tally.rounds();
    let log_term = (1.0 / delta).ln();
    (0..tally.link_count())
        .map(|l| {
            let n = total - tally.counts().get(l).copied().unwrap_or(0);
            if n == 0 {
                f64::INFINITY
            } else {
                (log_term / n as f64).sqrt()
            }
        })
        .collect()
}

/// Per-link confidence radii with exponent 1/2 and unit constants.
///
/// Unicast: `sum_{m: kappa != 0} |kappa_{l,m}| sqrt(log(1/(delta M)) / S_m)`,
/// which needs `delta < 1/M`. RI multicast: `sqrt(log(1/delta) / n_l)` with
/// `n_l` the trials pooled for link `l`. Unobserved inputs give `+inf`.
pub fn confidence_radii(
    tally: &TallyState,
    matrix: &MeasurementMatrix,
    delta: f64,
    mode: ProbeMode,
) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    match mode {
        ProbeMode::RiMulticast => Ok(ri_radii(tally, delta)),
        ProbeMode::Unicast => {
            let m_count = matrix.probe_count();
            let log_term = (1.0 / (delta * m_count as f64)).ln();
            if log_term <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "delta must be below 1/M = {}",
                    1.0 / m_count as f64
                )));
            }
            let kappa = matrix.kappa();
            Ok((0..matrix.link_count())
                .map(|l| {
                    (0..m_count)
                        .filter(|&m| kappa[(l, m)].abs() > 1e-12)
                        .map(|m| match tally.count(m) {
                            0 => f64::INFINITY,
                            s => kappa[(l, m)].abs() * (log_term / s as f64).sqrt(),
                        })
                        .sum()
                })
                .collect())
        }
    }
}
