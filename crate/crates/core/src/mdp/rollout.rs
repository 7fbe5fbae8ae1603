use rand::Rng;

use super::{FiniteMdp, MdpError, Policy};

/// Worst-case truncation error `gamma^horizon * r_max / (1 - gamma)`.
pub fn truncation_bound(gamma: f64, r_max: f64, horizon: usize) -> f64 {
    gamma.powi(horizon as i32) * r_max / (1.0 - gamma)
}

/// Smallest horizon whose truncation bound is at most `tol`.
pub fn horizon_for_tolerance(gamma: f64, r_max: f64, tol: f64) -> usize {
    if r_max <= 0.0 {
        return 1;
    }
    let raw = (tol * (1.0 - gamma) / r_max).ln() / gamma.ln();
    let mut h = raw.ceil().max(1.0) as usize;
    while truncation_bound(gamma, r_max, h) > tol {
        h += 1;
    }
    h
}

/// Truncated discounted returns `sum_{t < horizon} gamma^t r_t` starting from
/// `(S0, A0) = (s, a)` and following `pi` afterwards.
pub fn monte_carlo_returns<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    pi: &Policy,
    s: usize,
    a: usize,
    horizon: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Vec<f64>, MdpError> {
    mdp.check_pair(s, a)?;
    if pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions {
        return Err(MdpError::ShapeMismatch {
            what: "policy",
            expected: mdp.n_states * mdp.n_actions,
            got: pi.n_states() * pi.n_actions(),
        });
    }
    let mut out = Vec::with_capacity(n_rollouts);
    for _ in 0..n_rollouts {
        let (mut state, mut action) = (s, a);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            let (r, s_next) = mdp.sample_step_unchecked(state, action, rng);
            ret += discount * r;
            discount *= mdp.gamma;
            if t + 1 < horizon {
                state = s_next;
                action = pi.sample(state, rng);
            }
        }
        out.push(ret);
    }
    Ok(out)
}
