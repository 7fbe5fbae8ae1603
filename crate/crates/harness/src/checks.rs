//! Property checks shared by `verify-theory` and the acceptance suite.

use dde_core::distortion::{
    contraction_ratio, dde_step, iterate_fixed_point, projected_bellman_step, BellmanSource, DistortionError,
    DistortionTable, MissingData, DEFAULT_TOL,
};
use dde_core::ensemble::{init_ensemble, EnsembleConfig, InitScheme, NextAction};
use dde_core::mdp::{
    generate_offline_dataset, horizon_for_tolerance, monte_carlo_returns, random_point_mass_mdp, FiniteMdp, Policy,
    SamplingScheme,
};
use dde_core::quantile::{sup_wasserstein, wasserstein, AtomMixture, QuantileTable, TableShape};
use dde_core::theory::{
    clt_experiment, concentration_experiment, min_interior_density, reference_eta, reference_mdp, sandwich_check,
    TheoremReport, TheoryError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TheorySection;

fn report(name: &str, statistic: f64, target: f64, tolerance: f64, replicates: usize, passed: bool) -> TheoremReport {
    TheoremReport {
        name: name.into(),
        statistic,
        bound_or_target: target,
        tolerance,
        replicates,
        passed,
        details: Vec::new(),
    }
}

fn random_table(shape: TableShape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> QuantileTable {
    QuantileTable::new(shape, (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect()).expect("finite atoms")
}

fn random_policy(ns: usize, na: usize, rng: &mut ChaCha8Rng) -> Policy {
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let w: Vec<f64> = (0..na).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / total));
    }
    Policy::new(ns, na, probs).expect("normalized rows")
}

fn random_phi(shape: TableShape, hi: f64, rng: &mut ChaCha8Rng) -> DistortionTable {
    DistortionTable::new(shape, (0..shape.len()).map(|_| rng.random_range(0.0..hi)).collect(), true)
        .expect("nonnegative phi")
}

/// Largest `w_inf` contraction ratio of the distorted projected operator
/// over random table pairs on a 5-state, 3-action model.
pub fn contraction_check(pairs: usize, rng: &mut ChaCha8Rng) -> Result<TheoremReport, DistortionError> {
    let gamma = 0.9;
    let mdp = random_point_mass_mdp(5, 3, 3, gamma, rng);
    let pi = random_policy(5, 3, rng);
    let shape = TableShape::new(5, 3, 16);
    let src = BellmanSource::Model(&mdp);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let phi = random_phi(shape, 2.0, rng);
        let mu = random_table(shape, -10.0, 10.0, rng);
        let nu = random_table(shape, -10.0, 10.0, rng);
        let r = contraction_ratio(|e| dde_step(&src, &pi, e, &phi), &mu, &nu, f64::INFINITY)?;
        worst = worst.max(r);
    }
    Ok(report("contraction", worst, gamma, 1e-12, pairs, worst <= gamma + 1e-12))
}

/// Sandwich check on random point-mass models with random `phi >= 0`.
pub fn sandwich_suite(
    instances: usize,
    atoms: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(TheoremReport, Vec<TheoremReport>), TheoryError> {
    let mut all = Vec::with_capacity(instances);
    for _ in 0..instances {
        let ns = rng.random_range(2..5);
        let na = rng.random_range(1..4);
        let mdp = random_point_mass_mdp(ns, na, 2, 0.9, rng);
        let pi = random_policy(ns, na, rng);
        let phi = random_phi(TableShape::new(ns, na, atoms), 0.5, rng);
        all.push(sandwich_check(&mdp, &pi, &phi, atoms, tol)?);
    }
    let worst = all.iter().map(|r| r.statistic).fold(f64::NEG_INFINITY, f64::max);
    let passed = all.iter().all(|r| r.passed);
    let mut summary = report("sandwich_suite", worst, 0.0, tol, instances, passed);
    summary.details.push(("failed_instances".into(), all.iter().filter(|r| !r.passed).count().to_string()));
    Ok((summary, all))
}

/// CLT experiments on the reference model, one report per level.
pub fn clt_suite(t: &TheorySection, rng: &mut ChaCha8Rng) -> Result<Vec<TheoremReport>, TheoryError> {
    let mdp = reference_mdp();
    let pi = Policy::uniform(1, 1);
    let eta = reference_eta(32);
    let density = min_interior_density(&mdp, &pi, &eta, 0, 0, 10_000)?;
    if !(density > 0.0) {
        return Err(TheoryError::InvalidParameter("reference target has a zero-density gap".into()));
    }
    t.clt_taus
        .iter()
        .map(|&tau| clt_experiment(&mdp, &pi, &eta, 0, 0, tau, t.clt_n, t.clt_replicates, rng))
        .collect()
}

pub fn concentration_check(t: &TheorySection, rng: &mut ChaCha8Rng) -> Result<TheoremReport, TheoryError> {
    let mdp = reference_mdp();
    let pi = Policy::uniform(1, 1);
    let eta = reference_eta(32);
    concentration_experiment(&mdp, &pi, &eta, t.conc_tau, t.conc_n, t.conc_delta, t.conc_replicates, rng)
}

/// Undistorted fixed point at `M = 32` against Monte Carlo returns at every
/// pair of random 2-state, 2-action models.
pub fn oracle_check(n_mdps: usize, rollouts: usize, rng: &mut ChaCha8Rng) -> Result<TheoremReport, DistortionError> {
    let m = 32;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut failures = 0;
    let mut pairs = 0;
    let mut rep = report("oracle", 0.0, 0.0, 0.0, 0, false);
    for k in 0..n_mdps {
        let mdp = random_point_mass_mdp(2, 2, 2, 0.9, rng);
        let pi = random_policy(2, 2, rng);
        let src = BellmanSource::Model(&mdp);
        let shape = TableShape::new(2, 2, m);
        let budget = dde_core::distortion::default_max_iter(DEFAULT_TOL, mdp.gamma);
        let (fp, _) =
            iterate_fixed_point(|e| projected_bellman_step(&src, &pi, e), &QuantileTable::zeros(shape), DEFAULT_TOL, budget)?;
        let horizon = horizon_for_tolerance(mdp.gamma, mdp.r_max(), 1e-4);
        for s in 0..2 {
            for a in 0..2 {
                let returns = monte_carlo_returns(&mdp, &pi, s, a, horizon, rollouts, rng)
                    .map_err(|e| DistortionError::Bellman(e.into()))?;
                let n = returns.len() as f64;
                let mean = returns.iter().sum::<f64>() / n;
                let sd = (returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                let d = wasserstein(&AtomMixture::uniform(fp.row(s, a)), &AtomMixture::uniform(&returns), 1.0)?;
                let tol = 2.0 * mdp.return_range() / m as f64 + 3.0 * sd / n.sqrt();
                worst_excess = worst_excess.max(d - tol);
                if d > tol {
                    failures += 1;
                }
                pairs += 1;
                rep.details.push((format!("mdp{k}_s{s}_a{a}_w1"), format!("{d:.6}")));
            }
        }
    }
    rep.statistic = worst_excess;
    rep.replicates = pairs;
    rep.passed = failures == 0;
    rep.details.push(("failures".into(), failures.to_string()));
    Ok(rep)
}

fn regression_instance(rng: &mut ChaCha8Rng) -> (FiniteMdp, Policy) {
    let mdp = random_point_mass_mdp(3, 2, 2, 0.7, rng);
    let pi = random_policy(3, 2, rng);
    (mdp, pi)
}

/// Ensemble regression with `beta = 0` and full batches against the
/// projected fixed point of the same dataset.
pub fn regression_check(steps: usize, rng: &mut ChaCha8Rng) -> Result<TheoremReport, Box<dyn std::error::Error>> {
    let (mdp, pi) = regression_instance(rng);
    let data = generate_offline_dataset(
        &mdp,
        &Policy::uniform(3, 2),
        600,
        &SamplingScheme::IidFromWeights(vec![1.0; 6]),
        rng,
    )?;
    let m = 16;
    let shape = TableShape::new(3, 2, m);
    let cfg = EnsembleConfig {
        beta: 0.0,
        gamma: mdp.gamma,
        kappa_huber: 0.01,
        kappa_polyak: 0.2,
        learning_rate: 1.0,
        next_action: NextAction::Enumerate,
        ..EnsembleConfig::default()
    };
    let v = data.max_abs_reward() / (1.0 - mdp.gamma);
    let mut ens = init_ensemble(4, shape, InitScheme::UniformRandom { lo: -v, hi: v }, cfg, rng)?;
    for _ in 0..steps {
        ens.regression_step(data.tuples(), &pi, None, rng)?;
        ens.polyak_update();
    }
    let src = BellmanSource::Dataset {
        data: &data,
        gamma: mdp.gamma,
        missing: MissingData::Error,
    };
    let (fp, _) =
        iterate_fixed_point(|e| projected_bellman_step(&src, &pi, e), &QuantileTable::zeros(shape), 1e-12, 10_000)?;
    let tol = 2.0 * (2.0 * v) / m as f64 + 1e-3;
    let mut worst = 0.0f64;
    for member in &ens.online {
        worst = worst.max(sup_wasserstein(member, &fp, 1.0)?);
    }
    Ok(report("regression", worst, 0.0, tol, ens.len(), worst <= tol))
}
