use dde_core::bellman::{empirical_bellman_cdf, exact_bellman_atoms};
use dde_core::mdp::{random_point_mass_mdp, OfflineDataset, Policy, Transition};
use dde_core::quantile::{QuantileTable, TableShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Both CDFs are right-continuous steps on the exact support, so the sup
/// distance is attained at one of its points.
fn sup_cdf_gap(data: &OfflineDataset, gamma: f64, pi: &Policy, eta: &QuantileTable, support: &[(f64, f64)]) -> f64 {
    support
        .iter()
        .map(|(z, f)| (empirical_bellman_cdf(data, gamma, pi, eta, 0, 1, *z).unwrap() - f).abs())
        .fold(0.0, f64::max)
}

#[test]
fn empirical_cdf_stays_inside_the_dkw_envelope() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mdp = random_point_mass_mdp(3, 2, 3, 0.9, &mut rng);
    let pi = Policy::new(3, 2, vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1]).unwrap();
    let shape = TableShape::new(3, 2, 4);
    let eta = QuantileTable::new(shape, (0..shape.len()).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let mix = exact_bellman_atoms(&mdp, &pi, &eta, 0, 1).unwrap();
    let mut points = mix.values().to_vec();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let support: Vec<(f64, f64)> = points.into_iter().map(|z| (z, mix.cdf(z))).collect();

    let reps = 500;
    let mut mean_gaps = Vec::new();
    for n in [100usize, 1000, 10_000] {
        let envelope = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
        let mut inside = 0;
        let mut total_gap = 0.0;
        for _ in 0..reps {
            let tuples: Vec<Transition> = (0..n)
                .map(|_| {
                    let (r, s_next) = mdp.sample_step(0, 1, &mut rng).unwrap();
                    Transition { s: 0, a: 1, r, s_next }
                })
                .collect();
            let data = OfflineDataset::from_tuples(3, 2, tuples).unwrap();
            let gap = sup_cdf_gap(&data, mdp.gamma, &pi, &eta, &support);
            total_gap += gap;
            if gap <= envelope {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.99 * reps as f64, "N = {n}: {inside}/{reps} inside {envelope}");
        mean_gaps.push(total_gap / reps as f64);
    }
    assert!(mean_gaps.windows(2).all(|w| w[1] < w[0]), "{mean_gaps:?}");
}
