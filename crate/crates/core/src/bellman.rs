//! Exact and empirical distributional Bellman operators on quantile tables.
//!
//! The exact operator pushes `eta` through one model step. The empirical
//! operator replaces the model expectation with an average over `D(s,a)`.
//! In both cases next actions are enumerated exactly under `pi`.

use thiserror::Error;

use crate::mdp::{FiniteMdp, MdpError, OfflineDataset, Policy, RewardDist};
use crate::quantile::{project_mixture, tau_hats, AtomMixture, QuantileError, QuantileTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BellmanError {
    #[error(transparent)]
    Mdp(#[from] MdpError),

    #[error(transparent)]
    Quantile(#[from] QuantileError),

    #[error("no data for pair (s={s}, a={a})")]
    NoData { s: usize, a: usize },

    #[error("continuous reward at (s={s}, a={a}); atom form needs point-mass rewards")]
    ContinuousReward { s: usize, a: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn check_shapes(
    n_states: usize,
    n_actions: usize,
    pi: &Policy,
    eta: &QuantileTable,
) -> Result<(), BellmanError> {
    let sh = eta.shape();
    if sh.n_states != n_states || sh.n_actions != n_actions {
        return Err(BellmanError::ShapeMismatch(format!(
            "table is {}x{}, model is {n_states}x{n_actions}",
            sh.n_states, sh.n_actions
        )));
    }
    if pi.n_states() != n_states || pi.n_actions() != n_actions {
        return Err(BellmanError::ShapeMismatch(format!(
            "policy is {}x{}, model is {n_states}x{n_actions}",
            pi.n_states(),
            pi.n_actions()
        )));
    }
    Ok(())
}

/// `p^pi(s', a' | s, a)` for all next pairs with positive weight.
pub fn next_pair_weights(mdp: &FiniteMdp, pi: &Policy, s: usize, a: usize) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        for (a2, &q) in pi.row(s2).iter().enumerate() {
            if q > 0.0 {
                out.push((s2, a2, p * q));
            }
        }
    }
    out
}

/// `P(R + gamma * x <= z)`, using the exact sum comparison for point masses
/// so that the result agrees with the atom form bit for bit.
#[inline]
fn shifted_reward_cdf(reward: &RewardDist, gamma_x: f64, z: f64) -> f64 {
    match reward {
        RewardDist::PointMassMixture { values, weights } => values
            .iter()
            .zip(weights)
            .filter(|(v, _)| **v + gamma_x <= z)
            .map(|(_, w)| *w)
            .sum(),
        _ => reward.cdf(z - gamma_x),
    }
}

/// CDF of `(T^pi eta)(s, a)` at `z`.
pub fn exact_bellman_cdf(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    z: f64,
) -> Result<f64, BellmanError> {
    check_shapes(mdp.n_states, mdp.n_actions, pi, eta)?;
    mdp.check_pair(s, a)?;
    Ok(exact_cdf_unchecked(mdp, pi, eta, s, a, z))
}

pub(crate) fn exact_cdf_unchecked(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    z: f64,
) -> f64 {
    let reward = mdp.reward(s, a);
    let inv_m = 1.0 / eta.n_atoms() as f64;
    let mut acc = 0.0;
    for (s2, a2, p) in next_pair_weights(mdp, pi, s, a) {
        let inner: f64 = eta
            .row(s2, a2)
            .iter()
            .map(|zm| shifted_reward_cdf(reward, mdp.gamma * zm, z))
            .sum();
        acc += p * inner * inv_m;
    }
    acc.clamp(0.0, 1.0)
}

/// `(T^pi eta)(s, a)` as a finite mixture; requires point-mass rewards.
pub fn exact_bellman_atoms(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
) -> Result<AtomMixture, BellmanError> {
    check_shapes(mdp.n_states, mdp.n_actions, pi, eta)?;
    mdp.check_pair(s, a)?;
    let (values, weights) = match mdp.reward(s, a) {
        RewardDist::PointMassMixture { values, weights } => (values, weights),
        _ => return Err(BellmanError::ContinuousReward { s, a }),
    };
    let inv_m = 1.0 / eta.n_atoms() as f64;
    let mut vals = Vec::new();
    let mut ws = Vec::new();
    for (s2, a2, p) in next_pair_weights(mdp, pi, s, a) {
        for zm in eta.row(s2, a2) {
            for (v, w) in values.iter().zip(weights) {
                if *w > 0.0 {
                    vals.push(v + mdp.gamma * zm);
                    ws.push(p * w * inv_m);
                }
            }
        }
    }
    Ok(AtomMixture::from_unnormalized(vals, ws)?)
}

/// Smallest `z` with `cdf(z) >= tau`, by bisection on `[lo, hi]`.
///
/// Requires `cdf(lo) < tau <= cdf(hi)`; stops once the bracket is narrower
/// than `tol`.
pub fn bisect_quantile<F: Fn(f64) -> f64>(cdf: F, tau: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Support of `(T^pi eta)(s, a)`.
pub fn target_support(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s: usize, a: usize) -> (f64, f64) {
    let (rlo, rhi) = mdp.reward(s, a).support();
    let mut zlo = f64::INFINITY;
    let mut zhi = f64::NEG_INFINITY;
    for (s2, a2, _) in next_pair_weights(mdp, pi, s, a) {
        let row = eta.row(s2, a2);
        zlo = zlo.min(row[0]);
        zhi = zhi.max(row[row.len() - 1]);
    }
    let g = mdp.gamma;
    (rlo + g * zlo, rhi + g * zhi)
}

/// `Pi_w1 (T^pi eta)(s, a)`: target quantiles at the midpoints.
///
/// Point-mass rewards use the exact mixture; continuous rewards bisect the
/// closed-form CDF to `1e-12`.
pub fn exact_bellman_quantiles(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
) -> Result<Vec<f64>, BellmanError> {
    check_shapes(mdp.n_states, mdp.n_actions, pi, eta)?;
    mdp.check_pair(s, a)?;
    Ok(exact_quantiles_unchecked(mdp, pi, eta, s, a))
}

pub(crate) fn exact_quantiles_unchecked(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
) -> Vec<f64> {
    let m = eta.n_atoms();
    if mdp.reward(s, a).is_point_mass() {
        let mix = exact_bellman_atoms(mdp, pi, eta, s, a).expect("checked point mass");
        return project_mixture(&mix, m);
    }
    let (lo, hi) = target_support(mdp, pi, eta, s, a);
    let (lo, hi) = (lo - 1.0, hi + 1.0);
    tau_hats(m)
        .into_iter()
        .map(|tau| bisect_quantile(|z| exact_cdf_unchecked(mdp, pi, eta, s, a, z), tau, lo, hi, 1e-12))
        .collect()
}

fn empirical_pairs<'d>(
    dataset: &'d OfflineDataset,
    s: usize,
    a: usize,
) -> Result<&'d [(f64, usize)], BellmanError> {
    crate::mdp::check_index("state", s, dataset.n_states())?;
    crate::mdp::check_index("action", a, dataset.n_actions())?;
    let pairs = dataset.pairs(s, a);
    if pairs.is_empty() {
        return Err(BellmanError::NoData { s, a });
    }
    Ok(pairs)
}

/// CDF of `(T^pi_D eta)(s, a)` at `z`.
pub fn empirical_bellman_cdf(
    dataset: &OfflineDataset,
    gamma: f64,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    z: f64,
) -> Result<f64, BellmanError> {
    check_shapes(dataset.n_states(), dataset.n_actions(), pi, eta)?;
    let pairs = empirical_pairs(dataset, s, a)?;
    let inv_m = 1.0 / eta.n_atoms() as f64;
    let mut acc = 0.0;
    for &(r, s2) in pairs {
        for (a2, &q) in pi.row(s2).iter().enumerate() {
            if q <= 0.0 {
                continue;
            }
            let count = eta.row(s2, a2).iter().filter(|zm| r + gamma * **zm <= z).count();
            acc += q * count as f64 * inv_m;
        }
    }
    Ok((acc / pairs.len() as f64).clamp(0.0, 1.0))
}

/// `(T^pi_D eta)(s, a)` as the weighted mixture of `r + gamma * Z(s', a', m)`.
pub fn empirical_bellman_mixture(
    dataset: &OfflineDataset,
    gamma: f64,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
) -> Result<AtomMixture, BellmanError> {
    check_shapes(dataset.n_states(), dataset.n_actions(), pi, eta)?;
    let pairs = empirical_pairs(dataset, s, a)?;
    let w0 = 1.0 / (pairs.len() * eta.n_atoms()) as f64;
    let mut vals = Vec::new();
    let mut ws = Vec::new();
    for &(r, s2) in pairs {
        for (a2, &q) in pi.row(s2).iter().enumerate() {
            if q <= 0.0 {
                continue;
            }
            for zm in eta.row(s2, a2) {
                vals.push(r + gamma * zm);
                ws.push(q * w0);
            }
        }
    }
    Ok(AtomMixture::from_unnormalized(vals, ws)?)
}

/// `Pi_w1 (T^pi_D eta)(s, a)`.
pub fn empirical_bellman_quantiles(
    dataset: &OfflineDataset,
    gamma: f64,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
) -> Result<Vec<f64>, BellmanError> {
    let mix = empirical_bellman_mixture(dataset, gamma, pi, eta, s, a)?;
    Ok(project_mixture(&mix, eta.n_atoms()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{random_point_mass_mdp, Transition};
    use crate::quantile::{sup_wasserstein, TableShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_state(reward: RewardDist, gamma: f64) -> FiniteMdp {
        FiniteMdp::new(1, 1, vec![1.0], vec![reward], gamma, vec![1.0]).unwrap()
    }

    #[test]
    fn cdf_single_pushforward_atom() {
        let mdp = one_state(RewardDist::point(1.0), 0.5);
        let pi = Policy::uniform(1, 1);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 4));
        for (z, want) in [(0.999, 0.0), (1.0, 1.0), (1.5, 1.0), (-3.0, 0.0)] {
            assert_eq!(exact_bellman_cdf(&mdp, &pi, &eta, 0, 0, z).unwrap(), want);
        }
    }

    #[test]
    fn cdf_uniform_reward_with_zero_eta() {
        for gamma in [0.1, 0.5, 0.95] {
            let mdp = one_state(RewardDist::Uniform { lo: 0.0, hi: 1.0 }, gamma);
            let pi = Policy::uniform(1, 1);
            let eta = QuantileTable::zeros(TableShape::new(1, 1, 3));
            for z in [-0.5, 0.0, 0.2, 0.77, 1.0, 2.0] {
                let got = exact_bellman_cdf(&mdp, &pi, &eta, 0, 0, z).unwrap();
                assert!((got - z.clamp(0.0, 1.0)).abs() < 1e-15);
            }
        }
    }

    /// Composite Simpson rule for the truncated Gaussian density.
    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        if b <= a {
            return 0.0;
        }
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ns = 3;
        let na = 2;
        let gamma = 0.8;
        let base = random_point_mass_mdp(ns, na, 1, gamma, &mut rng);
        let rewards: Vec<RewardDist> = (0..ns * na)
            .map(|_| RewardDist::TruncatedGaussian {
                mean: rng.random_range(-0.5..0.5),
                std: rng.random_range(0.2..0.6),
                lo: -1.0,
                hi: 1.0,
            })
            .collect();
        let mdp = FiniteMdp::new(ns, na, base.transition.clone(), rewards, gamma, base.rho0.clone())
            .unwrap();
        let pi = Policy::new(ns, na, vec![0.3, 0.7, 0.5, 0.5, 1.0, 0.0]).unwrap();
        let shape = TableShape::new(ns, na, 4);
        let eta = QuantileTable::new(shape, (0..shape.len()).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        for s in 0..ns {
            for a in 0..na {
                for z in [-2.5, -1.0, 0.0, 0.4, 1.3, 2.6] {
                    let mut oracle = 0.0;
                    for s2 in 0..ns {
                        for a2 in 0..na {
                            let p = mdp.transition_row(s, a)[s2] * pi.prob(s2, a2);
                            for m in 0..4 {
                                let t = z - gamma * eta.get(s2, a2, m);
                                let pdf = |x: f64| mdp.reward(s, a).pdf(x).unwrap();
                                let mass = simpson(pdf, -1.0, t.min(1.0), 4000);
                                oracle += p * 0.25 * mass;
                            }
                        }
                    }
                    let got = exact_bellman_cdf(&mdp, &pi, &eta, s, a, z).unwrap();
                    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn atom_examples() {
        let mdp = one_state(RewardDist::point(1.0), 0.5);
        let pi = Policy::uniform(1, 1);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 3));
        let mix = exact_bellman_atoms(&mdp, &pi, &eta, 0, 0).unwrap();
        assert_eq!(mix.values(), &[1.0, 1.0, 1.0]);
        assert!((mix.total_weight() - 1.0).abs() < 1e-15);
        assert_eq!(mix.cdf(1.0), 1.0);

        // two next states with weight 0.5, eta atoms 0 and 2, M = 1
        let mdp = FiniteMdp::new(
            2,
            1,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![RewardDist::point(0.0), RewardDist::point(0.0)],
            0.5,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = Policy::uniform(2, 1);
        let eta = QuantileTable::new(TableShape::new(2, 1, 1), vec![0.0, 2.0]).unwrap();
        let mix = exact_bellman_atoms(&mdp, &pi, &eta, 0, 0).unwrap();
        let mut oracle = Vec::new();
        for (s2, p) in [(0usize, 0.5), (1, 0.5)] {
            oracle.push((0.0 + 0.5 * eta.get(s2, 0, 0), p));
        }
        let got: Vec<(f64, f64)> = mix.values().iter().copied().zip(mix.weights().iter().copied()).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn atoms_reject_continuous_rewards() {
        let mdp = one_state(RewardDist::Uniform { lo: 0.0, hi: 1.0 }, 0.5);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 2));
        assert!(matches!(
            exact_bellman_atoms(&mdp, &Policy::uniform(1, 1), &eta, 0, 0),
            Err(BellmanError::ContinuousReward { .. })
        ));
    }

    #[test]
    fn atom_cdf_agrees_with_closed_form_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mdp = random_point_mass_mdp(3, 2, 3, 0.9, &mut rng);
            let pi = Policy::uniform(3, 2);
            let shape = TableShape::new(3, 2, 5);
            let eta = QuantileTable::new(shape, (0..shape.len()).map(|_| rng.random_range(-3.0..3.0)).collect())
                .unwrap();
            for s in 0..3 {
                for a in 0..2 {
                    let mix = exact_bellman_atoms(&mdp, &pi, &eta, s, a).unwrap();
                    assert!((mix.total_weight() - 1.0).abs() < 1e-12);
                    for &z in mix.values() {
                        for zz in [z, z - 1e-9] {
                            let got = exact_bellman_cdf(&mdp, &pi, &eta, s, a, zz).unwrap();
                            assert!((mix.cdf(zz) - got).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empirical_examples() {
        let data = OfflineDataset::from_tuples(1, 1, vec![Transition { s: 0, a: 0, r: 1.0, s_next: 0 }]).unwrap();
        let pi = Policy::uniform(1, 1);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 6));
        assert_eq!(empirical_bellman_cdf(&data, 0.5, &pi, &eta, 0, 0, 0.99).unwrap(), 0.0);
        assert_eq!(empirical_bellman_cdf(&data, 0.5, &pi, &eta, 0, 0, 1.0).unwrap(), 1.0);
        assert_eq!(empirical_bellman_quantiles(&data, 0.5, &pi, &eta, 0, 0).unwrap(), vec![1.0; 6]);

        let empty = OfflineDataset::from_tuples(1, 1, vec![]).unwrap();
        assert_eq!(
            empirical_bellman_cdf(&empty, 0.5, &pi, &eta, 0, 0, 0.0),
            Err(BellmanError::NoData { s: 0, a: 0 })
        );
    }

    #[test]
    fn empirical_quantiles_of_two_point_mixture() {
        // target {0: 0.5, 2: 0.5}: two tuples with r = 0 and r = 2, eta = 0
        let data = OfflineDataset::from_tuples(
            1,
            1,
            vec![
                Transition { s: 0, a: 0, r: 0.0, s_next: 0 },
                Transition { s: 0, a: 0, r: 2.0, s_next: 0 },
            ],
        )
        .unwrap();
        let pi = Policy::uniform(1, 1);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 2));
        let mix = empirical_bellman_mixture(&data, 0.9, &pi, &eta, 0, 0).unwrap();
        let oracle: Vec<f64> = [0.25, 0.75].iter().map(|t| crate::quantile::inverse_cdf(&mix, *t).unwrap()).collect();
        let got = empirical_bellman_quantiles(&data, 0.9, &pi, &eta, 0, 0).unwrap();
        assert_eq!(got, oracle);
        assert_eq!(got, vec![0.0, 2.0]);
    }

    #[test]
    fn plug_in_identity_and_cdf_axioms() {
        // dyadic probabilities so that a finite dataset reproduces them exactly
        let mdp = FiniteMdp::new(
            2,
            2,
            vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0, 0.75, 0.25],
            vec![
                RewardDist::mixture(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap(),
                RewardDist::point(-0.5),
                RewardDist::mixture(vec![2.0, -1.0], vec![0.25, 0.75]).unwrap(),
                RewardDist::point(0.3),
            ],
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = Policy::new(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let mut tuples = Vec::new();
        for s in 0..2 {
            for a in 0..2 {
                let (vals, ws) = match mdp.reward(s, a) {
                    RewardDist::PointMassMixture { values, weights } => (values.clone(), weights.clone()),
                    _ => unreachable!(),
                };
                for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    for (v, w) in vals.iter().zip(&ws) {
                        let copies = (p * w * 16.0).round() as usize;
                        for _ in 0..copies {
                            tuples.push(Transition { s, a, r: *v, s_next: s2 });
                        }
                    }
                }
            }
        }
        let data = OfflineDataset::from_tuples(2, 2, tuples).unwrap();
        let shape = TableShape::new(2, 2, 3);
        let eta = QuantileTable::new(shape, vec![0.1, 0.5, 0.9, -1.0, 0.0, 1.0, 2.0, 2.0, 2.5, -0.3, 0.3, 0.7]).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let mix = exact_bellman_atoms(&mdp, &pi, &eta, s, a).unwrap();
                let mut prev = 0.0;
                let mut grid: Vec<f64> = mix.values().to_vec();
                grid.extend(mix.values().iter().map(|v| v - 1e-7));
                grid.sort_by(f64::total_cmp);
                for z in grid {
                    let e = empirical_bellman_cdf(&data, mdp.gamma, &pi, &eta, s, a, z).unwrap();
                    let x = exact_bellman_cdf(&mdp, &pi, &eta, s, a, z).unwrap();
                    assert!((e - x).abs() < 1e-12, "z={z}: {e} vs {x}");
                    assert!(e >= prev);
                    prev = e;
                }
                assert_eq!(empirical_bellman_cdf(&data, mdp.gamma, &pi, &eta, s, a, -1e9).unwrap(), 0.0);
                assert_eq!(empirical_bellman_cdf(&data, mdp.gamma, &pi, &eta, s, a, 1e9).unwrap(), 1.0);
                let q = empirical_bellman_quantiles(&data, mdp.gamma, &pi, &eta, s, a).unwrap();
                assert!(q.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    fn projected_table(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable) -> QuantileTable {
        QuantileTable::from_rows(eta.shape(), |s, a| exact_bellman_quantiles(mdp, pi, eta, s, a).unwrap())
            .unwrap()
    }

    #[test]
    fn projected_operator_contracts_in_sup_w_inf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = random_point_mass_mdp(4, 2, 2, 0.9, &mut rng);
        let pi = Policy::uniform(4, 2);
        let shape = TableShape::new(4, 2, 8);
        for _ in 0..200 {
            let mut draw = || {
                QuantileTable::new(shape, (0..shape.len()).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
            };
            let (x, y) = (draw(), draw());
            let before = sup_wasserstein(&x, &y, f64::INFINITY).unwrap();
            let after = sup_wasserstein(&projected_table(&mdp, &pi, &x), &projected_table(&mdp, &pi, &y), f64::INFINITY)
                .unwrap();
            assert!(after <= mdp.gamma * before + 1e-12, "{after} > {} * {before}", mdp.gamma);
        }
    }

    #[test]
    fn continuous_target_cdf_is_continuous_and_strictly_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = crate::mdp::random_uniform_reward_mdp(3, 2, 0.9, &mut rng);
        let pi = Policy::uniform(3, 2);
        let shape = TableShape::new(3, 2, 8);
        // evenly spread atoms keep the union of shifted supports connected
        let eta = QuantileTable::from_rows(shape, |_, _| {
            (0..8).map(|m| -0.5 + m as f64 / 7.0 + rng.random_range(-0.02..0.02)).collect()
        })
        .unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let (lo, hi) = target_support(&mdp, &pi, &eta, s, a);
                let n = 10_000;
                let h = (hi - lo) / n as f64;
                let mut prev = exact_bellman_cdf(&mdp, &pi, &eta, s, a, lo).unwrap();
                assert!(prev.abs() < 1e-12);
                for i in 1..=n {
                    let z = lo + i as f64 * h;
                    let f = exact_bellman_cdf(&mdp, &pi, &eta, s, a, z).unwrap();
                    assert!(f > prev, "not strictly increasing at {z}");
                    // density is bounded by 1 / (min reward width) = 2
                    assert!(f - prev <= 2.0 * h + 1e-12, "jump at {z}");
                    prev = f;
                }
                assert!((prev - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn continuous_quantiles_invert_the_cdf() {
        let mdp = one_state(RewardDist::Uniform { lo: 0.0, hi: 1.0 }, 0.5);
        let pi = Policy::uniform(1, 1);
        let eta = QuantileTable::zeros(TableShape::new(1, 1, 4));
        let q = exact_bellman_quantiles(&mdp, &pi, &eta, 0, 0).unwrap();
        for (m, v) in q.iter().enumerate() {
            assert!((v - (2 * m + 1) as f64 / 8.0).abs() < 1e-11);
        }
    }
}
