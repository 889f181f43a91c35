//! Probe outcome sampling and the per-probe sufficient statistics.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::topology::{Probe, ProbeSet};

/// Per-link success (classical) or no-flip (quantum) probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkParams(Vec<f64>);

impl LinkParams {
    /// Every entry must lie strictly inside (0, 1).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("link parameter vector is empty".into()));
        }
        if let Some((i, x)) = values
            .iter()
            .enumerate()
            .find(|(_, &x)| !(x > 0.0 && x < 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "link {} parameter {x} is outside (0, 1)",
                i + 1
            )));
        }
        Ok(LinkParams(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, link: usize) -> f64 {
        self.0[link]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Identity of a random stream: one per (scenario, Monte Carlo run, policy)
/// cell under a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master: u64,
    pub scenario: u64,
    pub run: u64,
    pub policy: u64,
}

/// Deterministic ChaCha stream keyed by a [`StreamKey`].
#[derive(Debug, Clone)]
pub struct RngStream {
    key: StreamKey,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        let mut seed = [0u8; 32];
        for (chunk, word) in seed
            .chunks_exact_mut(8)
            .zip([key.master, key.scenario, key.run, key.policy])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        RngStream {
            key,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// Words consumed so far.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Observation produced by one probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Unicast(bool),
    /// One bit per non-root link in ascending link order; `true` means the
    /// qubit arrived unflipped.
    RiMulticast(Vec<bool>),
}

/// Product of link success rates along the path. RI probes return the joint
/// probability that no observed link flips.
pub fn unicast_success_prob(probe: &Probe, mu: &LinkParams) -> f64 {
    probe
        .observed_links(mu.len())
        .into_iter()
        .map(|l| mu.get(l))
        .product()
}

pub fn sample_unicast<R: Rng + ?Sized>(probe: &Probe, mu: &LinkParams, rng: &mut R) -> bool {
    rng.random::<f64>() < unicast_success_prob(probe, mu)
}

pub fn sample_ri_multicast<R: Rng + ?Sized>(
    probe: &Probe,
    mu: &LinkParams,
    rng: &mut R,
) -> Vec<bool> {
    probe
        .observed_links(mu.len())
        .into_iter()
        .map(|l| rng.random::<f64>() < mu.get(l))
        .collect()
}

pub fn sample<R: Rng + ?Sized>(probe: &Probe, mu: &LinkParams, rng: &mut R) -> Outcome {
    match probe {
        Probe::Unicast { .. } => Outcome::Unicast(sample_unicast(probe, mu, rng)),
        Probe::RiMulticast { .. } => Outcome::RiMulticast(sample_ri_multicast(probe, mu, rng)),
    }
}

/// Counts accumulated over a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TallyState {
    link_count: usize,
    counts: Vec<u64>,
    successes: Vec<u64>,
    /// Row-major M×L no-flip counts.
    no_flip: Vec<u64>,
}

impl TallyState {
    pub fn new(probe_count: usize, link_count: usize) -> Self {
        TallyState {
            link_count,
            counts: vec![0; probe_count],
            successes: vec![0; probe_count],
            no_flip: vec![0; probe_count * link_count],
        }
    }

    pub fn for_probes(probes: &ProbeSet) -> Self {
        Self::new(probes.len(), probes.link_count())
    }

    pub fn probe_count(&self) -> usize {
        self.counts.len()
    }

    pub fn link_count(&self) -> usize {
        self.link_count
    }

    /// `S_m`.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, m: usize) -> u64 {
        self.counts[m]
    }

    /// `B_m`: unicast successes.
    pub fn successes(&self) -> &[u64] {
        &self.successes
    }

    /// `A_{m,l}`: unflipped arrivals on link `l` under probe `m`.
    pub fn no_flip(&self, m: usize, l: usize) -> u64 {
        self.no_flip[m * self.link_count + l]
    }

    /// Completed rounds, `sum_m S_m`.
    pub fn rounds(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Allocation actually realised so far, `S / t`.
    pub fn empirical_allocation(&self) -> Vec<f64> {
        let t = self.rounds();
        if t == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&s| s as f64 / t as f64).collect()
    }

    pub fn record(&mut self, probes: &ProbeSet, m: usize, outcome: &Outcome) -> Result<()> {
        if m >= self.counts.len() {
            return Err(Error::InvalidArgument(format!(
                "probe index {} out of range 1..={}",
                m + 1,
                self.counts.len()
            )));
        }
        match (probes.probe(m), outcome) {
            (Probe::Unicast { .. }, Outcome::Unicast(ok)) => {
                self.counts[m] += 1;
                self.successes[m] += u64::from(*ok);
            }
            (Probe::RiMulticast { root_link, .. }, Outcome::RiMulticast(bits)) => {
                if bits.len() + 1 != self.link_count {
                    return Err(Error::InvalidArgument(format!(
                        "RI outcome has {} bits, expected {}",
                        bits.len(),
                        self.link_count - 1
                    )));
                }
                self.counts[m] += 1;
                let links = (0..self.link_count).filter(|l| l != root_link);
                for (l, &bit) in links.zip(bits) {
                    self.no_flip[m * self.link_count + l] += u64::from(bit);
                }
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "outcome shape does not match probe {}",
                    m + 1
                )))
            }
        }
        Ok(())
    }
}
