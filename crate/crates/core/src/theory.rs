//! Empirical checks of the asymptotic normality, concentration and
//! fixed-point sandwich results for distributional evaluation.
//!
//! Everything is computed from the model in closed form where possible: the
//! target CDF and density, the quantile `z_tau` (bisection to `1e-12`) and
//! the exact variance of `F~(z | R, S')`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc_inv;
use thiserror::Error;

use crate::bellman::{
    bisect_quantile, exact_cdf_unchecked, next_pair_weights, target_support, BellmanError,
};
use crate::distortion::{
    default_max_iter, dde_step, iterate_fixed_point, projected_bellman_step, sandwich_bounds,
    BellmanSource, DistortionError, DistortionTable, DEFAULT_TOL,
};
use crate::mdp::{FiniteMdp, MdpError, Policy, RewardDist};
use crate::quantile::{QuantileTable, TableShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("point-mass reward at (s={s}, a={a}): the target has no density")]
    NoDensity { s: usize, a: usize },

    #[error("z = {z} is outside the interior of the target support [{lo}, {hi}]")]
    OutsideSupport { z: f64, lo: f64, hi: f64 },

    #[error("zero density at z_tau = {0} with nonzero variance")]
    ZeroDensity(f64),

    #[error("tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("fixed point iteration did not converge after {0} iterations")]
    NotConverged(usize),

    #[error(transparent)]
    Bellman(#[from] BellmanError),

    #[error(transparent)]
    Distortion(#[from] DistortionError),

    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// One state, one action, `Uniform(0, 1)` reward, `gamma = 0.5`.
pub fn reference_mdp() -> FiniteMdp {
    FiniteMdp::new(1, 1, vec![1.0], vec![RewardDist::Uniform { lo: 0.0, hi: 1.0 }], 0.5, vec![1.0])
        .expect("reference model is valid")
}

/// Projected fixed point of the reference model with `M` atoms.
pub fn reference_eta(n_atoms: usize) -> QuantileTable {
    let mdp = reference_mdp();
    let pi = Policy::uniform(1, 1);
    let src = BellmanSource::Model(&mdp);
    let eta0 = QuantileTable::zeros(TableShape::new(1, 1, n_atoms));
    let (eta, _) = iterate_fixed_point(|e| projected_bellman_step(&src, &pi, e), &eta0, 1e-10, 1000)
        .expect("reference iteration is well defined");
    eta
}

fn require_continuous(mdp: &FiniteMdp, s: usize, a: usize) -> Result<(), TheoryError> {
    mdp.check_pair(s, a)?;
    if mdp.reward(s, a).is_point_mass() {
        return Err(TheoryError::NoDensity { s, a });
    }
    Ok(())
}

fn density_unchecked(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s: usize, a: usize, z: f64) -> f64 {
    let reward = mdp.reward(s, a);
    let inv_m = 1.0 / eta.n_atoms() as f64;
    next_pair_weights(mdp, pi, s, a)
        .into_iter()
        .map(|(s2, a2, p)| {
            let inner: f64 = eta
                .row(s2, a2)
                .iter()
                .map(|zm| reward.pdf(z - mdp.gamma * zm).unwrap_or(0.0))
                .sum();
            p * inner * inv_m
        })
        .sum()
}

/// `f_{pi,theta}(z)`: derivative of the target CDF.
pub fn target_density(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    z: f64,
) -> Result<f64, TheoryError> {
    require_continuous(mdp, s, a)?;
    let (lo, hi) = target_support(mdp, pi, eta, s, a);
    if !(z > lo && z < hi) {
        return Err(TheoryError::OutsideSupport { z, lo, hi });
    }
    Ok(density_unchecked(mdp, pi, eta, s, a, z))
}

/// `z_tau = F^{-1}(tau)` of the exact target.
pub fn target_quantile(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s: usize, a: usize, tau: f64) -> f64 {
    let (lo, hi) = target_support(mdp, pi, eta, s, a);
    bisect_quantile(|z| exact_cdf_unchecked(mdp, pi, eta, s, a, z), tau, lo - 1.0, hi + 1.0, 1e-12)
}

/// Thresholds `z - gamma * Z(s', a', m)` and weights `pi(a'|s') / M` for one `s'`.
fn thresholds(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s2: usize, z: f64) -> Vec<(f64, f64)> {
    let inv_m = 1.0 / eta.n_atoms() as f64;
    let mut out = Vec::new();
    for (a2, &q) in pi.row(s2).iter().enumerate() {
        if q > 0.0 {
            out.extend(eta.row(s2, a2).iter().map(|zm| (z - mdp.gamma * zm, q * inv_m)));
        }
    }
    out.sort_by(|x, y| x.0.total_cmp(&y.0));
    out
}

/// `F~(z | r, s')`.
pub fn conditional_cdf(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, z: f64, r: f64, s2: usize) -> f64 {
    let inv_m = 1.0 / eta.n_atoms() as f64;
    pi.row(s2)
        .iter()
        .enumerate()
        .filter(|(_, q)| **q > 0.0)
        .map(|(a2, q)| q * inv_m * eta.row(s2, a2).iter().filter(|zm| r + mdp.gamma * **zm <= z).count() as f64)
        .sum()
}

/// `V[F~(z | R, S')]` for `R ~ R(s, a)`, `S' ~ P(.|s, a)`.
///
/// Given `S' = s'`, `F~` is a step function of `r` with thresholds `t_k`.
/// Sorting them, `E[F~^2] = sum_k w_k F_R(t_k) (w_k + 2 sum_{l>k} w_l)`.
pub fn conditional_cdf_variance(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s: usize, a: usize, z: f64) -> f64 {
    let reward = mdp.reward(s, a);
    let mut e1 = 0.0;
    let mut e2 = 0.0;
    for (s2, &p) in mdp.transition_row(s, a).iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let th = thresholds(mdp, pi, eta, s2, z);
        let mut tail: f64 = th.iter().map(|t| t.1).sum();
        let (mut m1, mut m2) = (0.0, 0.0);
        for &(t, w) in &th {
            tail -= w;
            let fr = reward.cdf(t);
            m1 += w * fr;
            m2 += w * fr * (w + 2.0 * tail.max(0.0));
        }
        e1 += p * m1;
        e2 += p * m2;
    }
    (e2 - e1 * e1).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticVariance {
    pub tau: f64,
    pub z_tau: f64,
    pub density: f64,
    /// `V[F~(z_tau | R, S')]`.
    pub ftilde_variance: f64,
    /// `sigma~^2_tau`; zero whenever `F~` is almost surely constant.
    pub sigma2: f64,
    /// `tau (1 - tau) / f^2`.
    pub upper_bound: f64,
}

pub fn asymptotic_variance(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    tau: f64,
) -> Result<AsymptoticVariance, TheoryError> {
    require_continuous(mdp, s, a)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TheoryError::TauOutOfRange(tau));
    }
    let z_tau = target_quantile(mdp, pi, eta, s, a, tau);
    let density = density_unchecked(mdp, pi, eta, s, a, z_tau);
    let v = conditional_cdf_variance(mdp, pi, eta, s, a, z_tau);
    let sigma2 = if v == 0.0 {
        0.0
    } else if density > 0.0 {
        v / (density * density)
    } else {
        return Err(TheoryError::ZeroDensity(z_tau));
    };
    let upper_bound = if density > 0.0 {
        tau * (1.0 - tau) / (density * density)
    } else {
        f64::INFINITY
    };
    Ok(AsymptoticVariance {
        tau,
        z_tau,
        density,
        ftilde_variance: v,
        sigma2,
        upper_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceLowerBound {
    pub z_bar: f64,
    pub z_under: f64,
    pub epsilon_prime: f64,
    /// Constant multiplying `epsilon'`; `1/18` when `3 | M`.
    pub constant: f64,
    /// `constant * epsilon' / f(z_tau)^2`.
    pub bound: f64,
}

/// Lower bound on `sigma~^2_tau`.
///
/// With `z_bar` the largest atom among the lowest `floor(2M/3)` levels and
/// `z_under` the smallest among the levels above `floor(M/3)`, `F~ >= a`
/// whenever `R <= z_tau - gamma z_bar` and `F~ <= b` whenever
/// `R > z_tau - gamma z_under`, where `a = floor(2M/3)/M`, `b = floor(M/3)/M`.
/// Hence `V[F~] >= epsilon' (a - b)^2 / 2` with
/// `epsilon' = min(P(R <= z_tau - gamma z_bar), P(R > z_tau - gamma z_under))`.
pub fn variance_lower_bound(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    tau: f64,
    s: usize,
    a: usize,
) -> Result<VarianceLowerBound, TheoryError> {
    let av = asymptotic_variance(mdp, pi, eta, s, a, tau)?;
    let m = eta.n_atoms();
    let k_hi = 2 * m / 3;
    let k_lo = m / 3;
    let shape = eta.shape();
    let mut z_bar = f64::NEG_INFINITY;
    let mut z_under = f64::INFINITY;
    for s2 in 0..shape.n_states {
        for a2 in 0..shape.n_actions {
            let row = eta.row(s2, a2);
            if k_hi > 0 {
                z_bar = z_bar.max(row[k_hi - 1]);
            }
            if k_lo < m {
                z_under = z_under.min(row[k_lo]);
            }
        }
    }
    let reward = mdp.reward(s, a);
    let p_low = if z_bar.is_finite() { reward.cdf(av.z_tau - mdp.gamma * z_bar) } else { 0.0 };
    let p_high = 1.0 - reward.cdf(av.z_tau - mdp.gamma * z_under);
    let epsilon_prime = p_low.min(p_high).max(0.0);
    let gap = (k_hi as f64 - k_lo as f64) / m as f64;
    let constant = gap * gap / 2.0;
    let bound = if epsilon_prime > 0.0 && av.density > 0.0 {
        constant * epsilon_prime / (av.density * av.density)
    } else {
        0.0
    };
    Ok(VarianceLowerBound {
        z_bar,
        z_under,
        epsilon_prime,
        constant,
        bound,
    })
}

/// `Delta = (1/f) sqrt(log(2 |S| |A| / delta) / (2N))`.
pub fn concentration_delta(
    f_at_z: f64,
    n: usize,
    n_states: usize,
    n_actions: usize,
    delta: f64,
) -> Result<f64, TheoryError> {
    if !(f_at_z > 0.0 && f_at_z.is_finite()) {
        return Err(TheoryError::InvalidParameter(format!("density {f_at_z}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(TheoryError::InvalidParameter(format!("delta {delta}")));
    }
    if n == 0 || n_states == 0 || n_actions == 0 {
        return Err(TheoryError::InvalidParameter("empty counts".into()));
    }
    let log_term = (2.0 * (n_states * n_actions) as f64 / delta).ln();
    Ok((log_term / (2.0 * n as f64)).sqrt() / f_at_z)
}

/// Samples of `(r, s')` at one pair, grouped by `s'` with sorted rewards so
/// the empirical target CDF costs `O(|S| |A| M log N)` per evaluation.
struct EmpiricalTarget {
    by_next: Vec<Vec<f64>>,
    n: usize,
}

impl EmpiricalTarget {
    fn sample<R: Rng + ?Sized>(mdp: &FiniteMdp, s: usize, a: usize, n: usize, rng: &mut R) -> Self {
        let mut by_next = vec![Vec::new(); mdp.n_states];
        for _ in 0..n {
            let (r, s2) = mdp.sample_step_unchecked(s, a, rng);
            by_next[s2].push(r);
        }
        for v in &mut by_next {
            v.sort_by(f64::total_cmp);
        }
        Self { by_next, n }
    }

    fn cdf(&self, mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, z: f64) -> f64 {
        let inv_m = 1.0 / eta.n_atoms() as f64;
        let mut acc = 0.0;
        for (s2, rs) in self.by_next.iter().enumerate() {
            if rs.is_empty() {
                continue;
            }
            for (a2, &q) in pi.row(s2).iter().enumerate() {
                if q <= 0.0 {
                    continue;
                }
                let c: usize = eta
                    .row(s2, a2)
                    .iter()
                    .map(|zm| rs.partition_point(|r| r + mdp.gamma * zm <= z))
                    .sum();
                acc += q * inv_m * c as f64;
            }
        }
        acc / self.n as f64
    }

    fn quantile(&self, mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, tau: f64) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for rs in self.by_next.iter().filter(|v| !v.is_empty()) {
            lo = lo.min(rs[0]);
            hi = hi.max(rs[rs.len() - 1]);
        }
        let (zlo, zhi) = (eta.min_atom(), eta.max_atom());
        let g = mdp.gamma;
        bisect_quantile(|z| self.cdf(mdp, pi, eta, z), tau, lo + g * zlo - 1.0, hi + g * zhi + 1.0, 1e-12)
    }
}

/// Outcome of one theorem check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub name: String,
    pub statistic: f64,
    pub bound_or_target: f64,
    pub tolerance: f64,
    pub replicates: usize,
    pub passed: bool,
    pub details: Vec<(String, String)>,
}

impl TheoremReport {
    pub const CSV_HEADER: &'static str = "name,statistic,bound_or_target,tolerance,replicates,passed,details";

    pub fn csv_row(&self) -> String {
        let details: Vec<String> = self.details.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!(
            "{},{:.10e},{:.10e},{:.3e},{},{},\"{}\"",
            self.name,
            self.statistic,
            self.bound_or_target,
            self.tolerance,
            self.replicates,
            self.passed,
            details.join(";")
        )
    }

    fn detail(&mut self, k: &str, v: impl ToString) {
        self.details.push((k.to_string(), v.to_string()));
    }
}

/// Replicate `k` draws from stream `k` of a generator seeded once from `rng`.
fn replicate_rngs<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ChaCha8Rng> {
    let seed: u64 = rng.random();
    (0..n)
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64);
            r
        })
        .collect()
}

fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Sampling distribution of `sqrt(N) (F^_D^{-1}(tau) - F^{-1}(tau))`.
///
/// Passes when the empirical variance is within 10% of `sigma~^2`, below
/// `1.1 tau (1 - tau) / f^2`, above the lower bound, and the mean is within
/// three standard errors of zero.
#[allow(clippy::too_many_arguments)]
pub fn clt_experiment<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    tau: f64,
    n: usize,
    replicates: usize,
    rng: &mut R,
) -> Result<TheoremReport, TheoryError> {
    if n == 0 || replicates < 2 {
        return Err(TheoryError::InvalidParameter("need N >= 1 and at least 2 replicates".into()));
    }
    let av = asymptotic_variance(mdp, pi, eta, s, a, tau)?;
    let lb = variance_lower_bound(mdp, pi, eta, tau, s, a)?;
    let root_n = (n as f64).sqrt();
    let mut xs: Vec<f64> = replicate_rngs(rng, replicates)
        .into_par_iter()
        .map(|mut r| {
            let emp = EmpiricalTarget::sample(mdp, s, a, n, &mut r);
            root_n * (emp.quantile(mdp, pi, eta, tau) - av.z_tau)
        })
        .collect();
    let k = replicates as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let ratio = var / av.sigma2;
    xs.sort_by(f64::total_cmp);
    let sd = av.sigma2.sqrt();
    let qq = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (x - sd * std_normal_quantile((i as f64 + 0.5) / k)).abs() / sd)
        .fold(0.0, f64::max);
    let ratio_ok = (0.9..=1.1).contains(&ratio);
    let upper_ok = var <= 1.1 * av.upper_bound;
    let lower_ok = lb.epsilon_prime <= 0.0 || lb.bound <= var;
    let mean_ok = mean.abs() <= 3.0 * sd / k.sqrt();
    let mut rep = TheoremReport {
        name: format!("clt_tau_{tau}"),
        statistic: ratio,
        bound_or_target: 1.0,
        tolerance: 0.1,
        replicates,
        passed: ratio_ok && upper_ok && lower_ok && mean_ok,
        details: Vec::new(),
    };
    rep.detail("n", n);
    rep.detail("z_tau", av.z_tau);
    rep.detail("density", av.density);
    rep.detail("sigma2", av.sigma2);
    rep.detail("empirical_variance", var);
    rep.detail("upper_bound", av.upper_bound);
    rep.detail("lower_bound", lb.bound);
    rep.detail("epsilon_prime", lb.epsilon_prime);
    rep.detail("mean", mean);
    rep.detail("qq_max_deviation", qq);
    rep.detail("ratio_ok", ratio_ok);
    rep.detail("upper_ok", upper_ok);
    rep.detail("lower_ok", lower_ok);
    rep.detail("mean_ok", mean_ok);
    Ok(rep)
}

/// `1.05` times the largest absolute slope of the target density on a
/// `10^4`-point grid over its support.
pub fn lipschitz_estimate(mdp: &FiniteMdp, pi: &Policy, eta: &QuantileTable, s: usize, a: usize) -> f64 {
    let (lo, hi) = target_support(mdp, pi, eta, s, a);
    let n = 10_000;
    let h = (hi - lo) / n as f64;
    let mut prev = density_unchecked(mdp, pi, eta, s, a, lo);
    let mut best = 0.0f64;
    for i in 1..=n {
        let f = density_unchecked(mdp, pi, eta, s, a, lo + i as f64 * h);
        best = best.max((f - prev).abs() / h);
        prev = f;
    }
    1.05 * best
}

/// Frequency, over replicates, of `|F^{-1}(tau) - F^_D^{-1}(tau)| >= 2 Delta`
/// at any pair, with `N` samples per pair.
#[allow(clippy::too_many_arguments)]
pub fn concentration_experiment<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    tau: f64,
    n: usize,
    delta: f64,
    replicates: usize,
    rng: &mut R,
) -> Result<TheoremReport, TheoryError> {
    if replicates == 0 {
        return Err(TheoryError::InvalidParameter("no replicates".into()));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut per_pair = Vec::with_capacity(ns * na);
    let mut hypothesis = true;
    let mut needed_n = 0.0f64;
    for s in 0..ns {
        for a in 0..na {
            let av = asymptotic_variance(mdp, pi, eta, s, a, tau)?;
            let d = concentration_delta(av.density, n, ns, na, delta)?;
            let alpha = lipschitz_estimate(mdp, pi, eta, s, a);
            let need = 2.0 * alpha * alpha / av.density.powi(4) * (2.0 * (ns * na) as f64 / delta).ln();
            needed_n = needed_n.max(need);
            hypothesis &= n as f64 >= need;
            per_pair.push((s, a, av.z_tau, d));
        }
    }
    let violations: usize = replicate_rngs(rng, replicates)
        .into_par_iter()
        .map(|mut r| {
            let any = per_pair.iter().any(|&(s, a, z, d)| {
                let emp = EmpiricalTarget::sample(mdp, s, a, n, &mut r);
                (emp.quantile(mdp, pi, eta, tau) - z).abs() >= 2.0 * d
            });
            usize::from(any)
        })
        .sum();
    let freq = violations as f64 / replicates as f64;
    let slack = 2.0 * (delta * (1.0 - delta) / replicates as f64).sqrt();
    let mut rep = TheoremReport {
        name: format!("concentration_tau_{tau}_delta_{delta}"),
        statistic: freq,
        bound_or_target: delta,
        tolerance: slack,
        replicates,
        passed: freq <= delta + slack,
        details: Vec::new(),
    };
    rep.detail("n", n);
    rep.detail("violations", violations);
    rep.detail("hypothesis_met", hypothesis);
    rep.detail("n_required", needed_n);
    rep.detail("delta_at_z_tau", per_pair.iter().map(|p| p.3).fold(0.0, f64::max));
    Ok(rep)
}

/// Compares the distorted fixed point with the bounds derived from the
/// undistorted one, allowing `tol + 2 range / M` of projection slack.
pub fn sandwich_check(
    mdp: &FiniteMdp,
    pi: &Policy,
    phi: &DistortionTable,
    m_large: usize,
    tol: f64,
) -> Result<TheoremReport, TheoryError> {
    if m_large < 64 {
        return Err(TheoryError::InvalidParameter(format!("M = {m_large} < 64")));
    }
    let shape = TableShape::new(mdp.n_states, mdp.n_actions, m_large);
    if phi.shape() != shape {
        return Err(TheoryError::InvalidParameter(format!("phi shape {:?} != {shape:?}", phi.shape())));
    }
    let src = BellmanSource::Model(mdp);
    let eta0 = QuantileTable::zeros(shape);
    let budget = default_max_iter(DEFAULT_TOL, mdp.gamma);
    let (f_inf, r0) = iterate_fixed_point(|e| projected_bellman_step(&src, pi, e), &eta0, DEFAULT_TOL, budget)?;
    if !r0.converged {
        return Err(TheoryError::NotConverged(r0.iterations));
    }
    let (g_inf, r1) = iterate_fixed_point(|e| dde_step(&src, pi, e, phi), &eta0, DEFAULT_TOL, budget)?;
    if !r1.converged {
        return Err(TheoryError::NotConverged(r1.iterations));
    }
    let (lower, upper) = sandwich_bounds(&f_inf, phi, mdp.gamma)?;
    let slack = tol + 2.0 * mdp.return_range() / m_large as f64;
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0usize;
    for i in 0..shape.len() {
        let z = g_inf.atoms()[i];
        let excess = (lower.atoms()[i] - z).max(z - upper.atoms()[i]);
        worst = worst.max(excess);
        if excess > slack {
            failures += 1;
        }
    }
    let mut rep = TheoremReport {
        name: "sandwich".into(),
        statistic: worst,
        bound_or_target: 0.0,
        tolerance: slack,
        replicates: shape.len(),
        passed: failures == 0,
        details: Vec::new(),
    };
    rep.detail("failures", failures);
    rep.detail("phi_sup", phi.sup());
    rep.detail("phi_inf", phi.inf());
    rep.detail("iterations_plain", r0.iterations);
    rep.detail("iterations_distorted", r1.iterations);
    Ok(rep)
}

/// Smallest target density over an interior grid of the support; positive
/// values certify the strictly increasing target CDF the checks rely on.
pub fn min_interior_density(
    mdp: &FiniteMdp,
    pi: &Policy,
    eta: &QuantileTable,
    s: usize,
    a: usize,
    n_grid: usize,
) -> Result<f64, TheoryError> {
    require_continuous(mdp, s, a)?;
    let (lo, hi) = target_support(mdp, pi, eta, s, a);
    let h = (hi - lo) / (n_grid + 1) as f64;
    Ok((1..=n_grid)
        .map(|i| density_unchecked(mdp, pi, eta, s, a, lo + i as f64 * h))
        .fold(f64::INFINITY, f64::min))
}
