//! Estimators, information matrices and probe sets checked against
//! independent computations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use opal_tomo::estimators::{
    general_link_mle, link_mle_from_rates, ri_link_mle, star_link_mle, MleConfig, Smoothing,
};
use opal_tomo::oed::probe_fim;
use opal_tomo::probes::{sample, LinkParams, Outcome, TallyState};
use opal_tomo::topology::{
    build_er, build_star, canonical_star_unicast_probes, general_unicast_probes,
    ri_multicast_probes, MeasurementMatrix, Probe, ProbeSet,
};

fn raw() -> MleConfig {
    MleConfig {
        smoothing: Smoothing::None,
        delta: 1e-3,
        ..MleConfig::default()
    }
}

fn unicast_tally(probes: &ProbeSet, hits: &[u64], trials: &[u64]) -> TallyState {
    let mut t = TallyState::for_probes(probes);
    for m in 0..probes.len() {
        for k in 0..trials[m] {
            t.record(probes, m, &Outcome::Unicast(k < hits[m])).unwrap();
        }
    }
    t
}

/// Bernoulli log-likelihood of unicast counts as a function of log mu.
fn log_lik(q: &DMatrix<f64>, theta: &[f64], hits: &[u64], trials: &[u64]) -> f64 {
    (0..q.nrows())
        .map(|m| {
            let log_nu: f64 = (0..q.ncols()).map(|l| q[(m, l)] * theta[l]).sum();
            let nu = log_nu.exp();
            let (b, s) = (hits[m] as f64, trials[m] as f64);
            if nu >= 1.0 {
                return f64::NEG_INFINITY;
            }
            b * log_nu + (s - b) * (1.0 - nu).ln()
        })
        .sum()
}

/// Cyclic golden-section coordinate ascent on log mu over (-12, 0). The
/// likelihood is concave in log mu, so this converges to the maximiser.
fn likelihood_oracle(q: &DMatrix<f64>, hits: &[u64], trials: &[u64]) -> Vec<f64> {
    let l = q.ncols();
    let mut theta = vec![-0.5; l];
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..5000 {
        for i in 0..l {
            let (mut a, mut b) = (-12.0, -1e-12);
            let f = |x: f64, th: &mut Vec<f64>| {
                th[i] = x;
                log_lik(q, th, hits, trials)
            };
            let mut th = theta.clone();
            for _ in 0..80 {
                let c = b - g * (b - a);
                let d = a + g * (b - a);
                if f(c, &mut th) > f(d, &mut th) {
                    b = d;
                } else {
                    a = c;
                }
            }
            theta[i] = 0.5 * (a + b);
        }
    }
    theta.iter().map(|t| t.exp()).collect()
}

#[test]
fn star_mle_matches_likelihood_oracle() {
    let probes = canonical_star_unicast_probes(&build_star(3).unwrap()).unwrap();
    let q = probes.matrix().q().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 25 {
        let trials: Vec<u64> = (0..3).map(|_| rng.random_range(20..400)).collect();
        let hits: Vec<u64> = trials.iter().map(|&s| rng.random_range(s / 4..s)).collect();
        let tally = unicast_tally(&probes, &hits, &trials);
        let closed = star_link_mle(&tally, probes.matrix(), &raw()).unwrap();
        // the closed form is the unconstrained maximiser; skip tallies whose
        // maximiser sits outside the unit cube
        let nu: Vec<f64> = hits.iter().zip(&trials).map(|(&b, &s)| b as f64 / s as f64).collect();
        let unclipped = link_mle_from_rates(&nu, probes.matrix(), 0.0);
        if unclipped.iter().any(|&x| x >= 0.999) {
            continue;
        }
        let oracle = likelihood_oracle(&q, &hits, &trials);
        for (a, b) in closed.mu_hat.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {oracle:?}", closed.mu_hat);
        }
        checked += 1;
    }
}

#[test]
fn smoothing_gap_is_bounded_and_shrinks() {
    // log mu_hat is linear in log nu_hat, so the smoothed and raw estimates
    // differ by at most exp(sum_m |kappa_lm| |log(nu_s / nu_r)|) - 1 relatively
    let probes = canonical_star_unicast_probes(&build_star(3).unwrap()).unwrap();
    let kappa = probes.matrix().kappa().clone();
    let mut gaps = vec![];
    for scale in [1u64, 10, 100] {
        let trials: Vec<u64> = vec![50 * scale; 3];
        let hits: Vec<u64> = [0.72, 0.63, 0.56]
            .iter()
            .map(|p| (p * (50 * scale) as f64) as u64)
            .collect();
        let tally = unicast_tally(&probes, &hits, &trials);
        let r = star_link_mle(&tally, probes.matrix(), &raw()).unwrap();
        let s = star_link_mle(&tally, probes.matrix(), &MleConfig::default()).unwrap();
        let dlog: Vec<f64> = hits
            .iter()
            .zip(&trials)
            .map(|(&b, &n)| {
                let raw_rate = b as f64 / n as f64;
                let smooth = (b as f64 + 0.5) / (n as f64 + 1.0);
                (smooth / raw_rate).ln().abs()
            })
            .collect();
        let mut worst = 0.0f64;
        for l in 0..3 {
            let bound: f64 = (0..3).map(|m| kappa[(l, m)].abs() * dlog[m]).sum();
            let rel = (s.mu_hat[l] / r.mu_hat[l]).ln().abs();
            assert!(rel <= bound + 1e-12, "link {l}: {rel} > {bound}");
            worst = worst.max((s.mu_hat[l] - r.mu_hat[l]).abs());
        }
        gaps.push(worst);
    }
    // first-order bias is O(1/S)
    assert!(gaps[1] < gaps[0] / 5.0 && gaps[2] < gaps[1] / 5.0, "{gaps:?}");
    assert!(gaps[2] < 1e-3);
}

/// Solves the normal equations `QᵀQ x = Qᵀ y` by Gauss–Jordan elimination
/// with partial pivoting.
fn normal_equations(q: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let l = q.ncols();
    let mut a = vec![vec![0.0; l + 1]; l];
    for i in 0..l {
        for j in 0..l {
            a[i][j] = (0..q.nrows()).map(|m| q[(m, i)] * q[(m, j)]).sum();
        }
        a[i][l] = (0..q.nrows()).map(|m| q[(m, i)] * y[m]).sum();
    }
    for c in 0..l {
        let p = (c..l)
            .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
            .unwrap();
        a.swap(c, p);
        for r in 0..l {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot = a[c].clone();
                for (x, p) in a[r].iter_mut().zip(&pivot).skip(c) {
                    *x -= f * p;
                }
            }
        }
    }
    (0..l).map(|i| a[i][l] / a[i][i]).collect()
}

fn overdetermined_er() -> ProbeSet {
    let topo = build_er(12, 0.3, 17).unwrap();
    let monitors = (0..topo.node_count()).collect();
    let probes = general_unicast_probes(&topo, &monitors, Some(topo.link_count() + 8)).unwrap();
    assert_eq!(probes.len(), probes.link_count() + 8);
    probes
}

#[test]
fn overdetermined_consistent_rates_recover_mu() {
    let probes = overdetermined_er();
    let l = probes.link_count();
    let mu: Vec<f64> = (0..l).map(|i| 0.55 + 0.4 * (i as f64 / l as f64)).collect();
    let q = probes.matrix().q();
    let nu: Vec<f64> = (0..probes.len())
        .map(|m| (0..l).map(|k| mu[k].powf(q[(m, k)])).product())
        .collect();
    let est = link_mle_from_rates(&nu, probes.matrix(), 1e-6);
    for (a, b) in est.iter().zip(&mu) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn overdetermined_noisy_rates_match_normal_equations() {
    let probes = overdetermined_er();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trials: Vec<u64> = vec![500; probes.len()];
    let hits: Vec<u64> = (0..probes.len()).map(|_| rng.random_range(200..480)).collect();
    let tally = unicast_tally(&probes, &hits, &trials);
    let est = general_link_mle(&tally, probes.matrix(), &raw()).unwrap();
    let y: Vec<f64> = hits.iter().map(|&b| (b as f64 / 500.0).ln()).collect();
    let x = normal_equations(probes.matrix().q(), &y);
    for (a, b) in est.mu_hat.iter().zip(&x) {
        let want = b.exp().clamp(1e-6, 1.0 - 1e-6);
        assert!((a - want).abs() < 1e-9, "{a} vs {want}");
    }
}

#[test]
fn square_general_mle_equals_star_mle() {
    let probes = canonical_star_unicast_probes(&build_star(6).unwrap()).unwrap();
    let tally = unicast_tally(&probes, &[80, 70, 60, 90, 50, 40], &[100; 6]);
    let a = star_link_mle(&tally, probes.matrix(), &MleConfig::default()).unwrap();
    let b = general_link_mle(&tally, probes.matrix(), &MleConfig::default()).unwrap();
    for (x, y) in a.mu_hat.iter().zip(&b.mu_hat) {
        assert!((x - y).abs() < 1e-12);
    }
}

/// Log-probability of an outcome.
fn log_prob(probe: &Probe, mu: &[f64], outcome: &Outcome) -> f64 {
    match (probe, outcome) {
        (Probe::Unicast { links, .. }, Outcome::Unicast(ok)) => {
            let nu: f64 = links.iter().map(|&l| mu[l]).product();
            if *ok {
                nu.ln()
            } else {
                (1.0 - nu).ln()
            }
        }
        (Probe::RiMulticast { root_link, .. }, Outcome::RiMulticast(bits)) => (0..mu.len())
            .filter(|l| l != root_link)
            .zip(bits)
            .map(|(l, &b)| if b { mu[l].ln() } else { (1.0 - mu[l]).ln() })
            .sum(),
        _ => unreachable!(),
    }
}

/// Score covariance by Monte Carlo, with the score taken by central
/// differences of the log-probability.
fn empirical_fim(probe: &Probe, mu: &[f64], draws: usize, seed: u64) -> DMatrix<f64> {
    let l = mu.len();
    let params = LinkParams::new(mu.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut acc = DMatrix::zeros(l, l);
    // outcomes repeat, so cache scores by outcome
    let mut cache: std::collections::HashMap<Vec<bool>, nalgebra::DVector<f64>> =
        std::collections::HashMap::new();
    for _ in 0..draws {
        let o = sample(probe, &params, &mut rng);
        let key = match &o {
            Outcome::Unicast(b) => vec![*b],
            Outcome::RiMulticast(bits) => bits.clone(),
        };
        let score = cache
            .entry(key)
            .or_insert_with(|| {
                nalgebra::DVector::from_fn(l, |i, _| {
                    let mut up = mu.to_vec();
                    let mut dn = mu.to_vec();
                    up[i] += h;
                    dn[i] -= h;
                    (log_prob(probe, &up, &o) - log_prob(probe, &dn, &o)) / (2.0 * h)
                })
            })
            .clone();
        acc += &score * score.transpose();
    }
    acc / draws as f64
}

fn assert_close_rel(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
    let rel = (a - b).norm() / b.norm();
    assert!(rel < tol, "relative error {rel}\n{a}\n{b}");
}

#[test]
fn unicast_fim_matches_score_covariance() {
    let probes = canonical_star_unicast_probes(&build_star(3).unwrap()).unwrap();
    let mu = [0.9, 0.7, 0.6];
    let params = LinkParams::new(mu.to_vec()).unwrap();
    for m in 0..3 {
        let exact = probe_fim(probes.probe(m), &params);
        let mc = empirical_fim(probes.probe(m), &mu, 1_000_000, m as u64);
        assert_close_rel(&mc, &exact, 0.01);
    }
}

#[test]
fn ri_fim_matches_score_covariance() {
    let probes = ri_multicast_probes(&build_star(3).unwrap()).unwrap();
    let mu = [0.8, 0.6, 0.95];
    let params = LinkParams::new(mu.to_vec()).unwrap();
    for m in 0..3 {
        let exact = probe_fim(probes.probe(m), &params);
        let mc = empirical_fim(probes.probe(m), &mu, 1_000_000, 10 + m as u64);
        assert_close_rel(&mc, &exact, 0.01);
    }
}

/// Exact rank over the rationals by fraction-free elimination on integers.
fn integer_rank(rows: Vec<Vec<i128>>) -> usize {
    let mut a = rows;
    let (n, m) = (a.len(), a.first().map_or(0, |r| r.len()));
    let mut rank = 0;
    for c in 0..m {
        let Some(p) = (rank..n).find(|&r| a[r][c] != 0) else {
            continue;
        };
        a.swap(rank, p);
        for r in 0..n {
            if r != rank && a[r][c] != 0 {
                let (f, g) = (a[r][c], a[rank][c]);
                let pivot = a[rank].clone();
                for (x, p) in a[r].iter_mut().zip(&pivot) {
                    *x = *x * g - p * f;
                }
                let d = a[r].iter().fold(0i128, |acc, &x| gcd(acc, x.abs()));
                if d > 1 {
                    a[r].iter_mut().for_each(|x| *x /= d);
                }
            }
        }
        rank += 1;
    }
    rank
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn int_rows(q: &DMatrix<f64>) -> Vec<Vec<i128>> {
    (0..q.nrows())
        .map(|i| (0..q.ncols()).map(|j| q[(i, j)].round() as i128).collect())
        .collect()
}

#[test]
fn er_probe_sets_have_exact_full_rank() {
    for seed in 0..20 {
        let topo = build_er(20, 0.18, seed).unwrap();
        let monitors = (0..topo.node_count()).collect();
        let probes = general_unicast_probes(&topo, &monitors, None).unwrap();
        let q = probes.matrix().q();
        assert_eq!(q.nrows(), q.ncols());
        assert_eq!(integer_rank(int_rows(q)), topo.link_count(), "seed {seed}");
        assert_eq!(probes.matrix().rank(), topo.link_count());
    }
}

#[test]
fn unidentifiable_links_match_exact_rank_deficit() {
    // a path 1-2-3-4 monitored only at its ends: no link is separable
    let topo = opal_tomo::topology::Topology::new(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
    let monitors = [0, 3].into_iter().collect();
    match general_unicast_probes(&topo, &monitors, None) {
        Err(opal_tomo::Error::Identifiability { links, .. }) => assert_eq!(links, vec![1, 2, 3]),
        other => panic!("{other:?}"),
    }
    let q = MeasurementMatrix::from_rows(&[vec![0, 1], vec![1, 2]], 3);
    assert!(q.is_err());
}

#[test]
fn ri_error_decays_as_inverse_root_n() {
    let probes = ri_multicast_probes(&build_star(3).unwrap()).unwrap();
    let mu = LinkParams::new(vec![0.7, 0.85, 0.6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ns = [100u64, 1000, 10_000, 100_000];
    let trials = 100;
    let errs: Vec<f64> = ns
        .iter()
        .map(|&n| {
            let mut total = 0.0;
            for _ in 0..trials {
                let mut tally = TallyState::for_probes(&probes);
                for m in 0..3 {
                    for _ in 0..n {
                        let o = sample(probes.probe(m), &mu, &mut rng);
                        tally.record(&probes, m, &o).unwrap();
                    }
                }
                let est = ri_link_mle(&tally, &MleConfig::default()).unwrap();
                total += (est.mu_hat[0] - mu.get(0)).abs();
            }
            total / trials as f64
        })
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((-0.6..=-0.4).contains(&slope), "slope {slope}, errors {errs:?}");
}

#[test]
fn ri_outcomes_pass_chi_square() {
    // joint law of the two surviving bits: product Bernoulli
    let probes = ri_multicast_probes(&build_star(3).unwrap()).unwrap();
    let mu = LinkParams::new(vec![0.7, 0.85, 0.6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 100_000;
    let mut cells = [0usize; 4];
    for _ in 0..n {
        if let Outcome::RiMulticast(b) = sample(probes.probe(0), &mu, &mut rng) {
            cells[usize::from(b[0]) * 2 + usize::from(b[1])] += 1;
        }
    }
    let (p1, p2) = (0.85, 0.6);
    let expect = [
        (1.0 - p1) * (1.0 - p2),
        (1.0 - p1) * p2,
        p1 * (1.0 - p2),
        p1 * p2,
    ];
    let chi2: f64 = cells
        .iter()
        .zip(expect)
        .map(|(&o, p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    // 3 degrees of freedom, p = 0.001
    assert!(chi2 < 16.27, "chi2 {chi2}");
}
