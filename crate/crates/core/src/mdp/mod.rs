//! Finite Markov decision processes with bounded reward distributions.
//!
//! A [`FiniteMdp`] stores the transition kernel `P(s'|s,a)` as a dense
//! `[s][a][s']` table, one [`RewardDist`] per state-action pair, the discount
//! and the initial state distribution. Policies, offline datasets and
//! Monte-Carlo rollouts live in the submodules.

mod builders;
mod dataset;
mod policy;
mod reward;
mod rollout;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use builders::{
    chain_mdp, gridworld_mdp, random_point_mass_mdp, random_uniform_reward_mdp, ChainReward,
};
pub use dataset::{
    generate_offline_dataset, DatasetHeader, OfflineDataset, SamplingScheme, Transition,
};
pub use policy::Policy;
pub use reward::RewardDist;
pub use rollout::{horizon_for_tolerance, monte_carlo_returns, truncation_bound};

/// Tolerance for "sums to one" checks on probability tables.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("row not stochastic: P(.|s={state}, a={action}) sums to {sum} (off by {deviation:e})")]
    RowNotStochastic {
        state: usize,
        action: usize,
        sum: f64,
        deviation: f64,
    },

    #[error("negative transition probability {value} at P({next}|s={state}, a={action})")]
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("gamma out of range: {0} is not in (0, 1)")]
    GammaOutOfRange(f64),

    #[error("initial distribution not stochastic: sums to {sum} (off by {deviation:e})")]
    Rho0NotStochastic { sum: f64, deviation: f64 },

    #[error("policy row not stochastic: pi(.|s={state}) sums to {sum} (off by {deviation:e})")]
    PolicyRowNotStochastic {
        state: usize,
        sum: f64,
        deviation: f64,
    },

    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid reward at (s={state}, a={action}): {reason}")]
    InvalidReward {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("invalid reward distribution: {0}")]
    RewardSpec(String),

    #[error("{what} index {index} out of range (size {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("dataset size must be at least 1")]
    EmptyRequest,

    #[error("sampling weights have no support")]
    ZeroSupportWeights,

    #[error("invalid sampling weights: {0}")]
    InvalidWeights(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for MdpError {
    fn from(e: std::io::Error) -> Self {
        MdpError::Io(e.to_string())
    }
}

/// Tabular MDP `(S, A, P, R, rho0, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[(s * n_actions + a) * n_states + s']`
    pub transition: Vec<f64>,
    /// `rewards[s * n_actions + a]`
    pub rewards: Vec<RewardDist>,
    pub gamma: f64,
    pub rho0: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        rewards: Vec<RewardDist>,
        gamma: f64,
        rho0: Vec<f64>,
    ) -> Result<Self, MdpError> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            rewards,
            gamma,
            rho0,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), MdpError> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(MdpError::ShapeMismatch {
                what: "state/action count",
                expected: 1,
                got: 0,
            });
        }
        check_len("transition table", ns * na * ns, self.transition.len())?;
        check_len("reward table", ns * na, self.rewards.len())?;
        check_len("rho0", ns, self.rho0.len())?;

        for s in 0..ns {
            for a in 0..na {
                let row = self.transition_row(s, a);
                if let Some((next, &value)) = row
                    .iter()
                    .enumerate()
                    .find(|(_, p)| !(p.is_finite() && **p >= 0.0))
                {
                    return Err(MdpError::NegativeProbability {
                        state: s,
                        action: a,
                        next,
                        value,
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(MdpError::RowNotStochastic {
                        state: s,
                        action: a,
                        sum,
                        deviation: (sum - 1.0).abs(),
                    });
                }
                self.reward(s, a)
                    .validate()
                    .map_err(|reason| MdpError::InvalidReward {
                        state: s,
                        action: a,
                        reason,
                    })?;
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MdpError::GammaOutOfRange(self.gamma));
        }
        let sum: f64 = self.rho0.iter().sum();
        if self.rho0.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL
        {
            return Err(MdpError::Rho0NotStochastic {
                sum,
                deviation: (sum - 1.0).abs(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> &RewardDist {
        &self.rewards[s * self.n_actions + a]
    }

    /// Largest absolute reward over all supports.
    pub fn r_max(&self) -> f64 {
        self.rewards
            .iter()
            .map(RewardDist::max_abs)
            .fold(0.0, f64::max)
    }

    /// Bound `r_max / (1 - gamma)` on the absolute discounted return.
    pub fn return_bound(&self) -> f64 {
        self.r_max() / (1.0 - self.gamma)
    }

    /// Width of the computable return range `[-V, V]`.
    pub fn return_range(&self) -> f64 {
        2.0 * self.return_bound()
    }

    pub fn all_point_mass(&self) -> bool {
        self.rewards.iter().all(RewardDist::is_point_mass)
    }

    pub fn all_continuous(&self) -> bool {
        self.rewards.iter().all(|r| !r.is_point_mass())
    }

    pub fn check_pair(&self, s: usize, a: usize) -> Result<(), MdpError> {
        check_index("state", s, self.n_states)?;
        check_index("action", a, self.n_actions)
    }

    /// Draws `(r, s')` for one step from `(s, a)`.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> Result<(f64, usize), MdpError> {
        self.check_pair(s, a)?;
        Ok(self.sample_step_unchecked(s, a, rng))
    }

    pub(crate) fn sample_step_unchecked<R: Rng + ?Sized>(
        &self,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> (f64, usize) {
        let s_next = sample_index(self.transition_row(s, a), rng);
        let r = self.reward(s, a).sample(rng);
        (r, s_next)
    }

    /// SHA-256 over a canonical byte encoding of the model, hex encoded.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_states as u64).to_le_bytes());
        h.update((self.n_actions as u64).to_le_bytes());
        for p in &self.transition {
            h.update(p.to_bits().to_le_bytes());
        }
        for r in &self.rewards {
            r.hash_into(&mut h);
        }
        h.update(self.gamma.to_bits().to_le_bytes());
        for p in &self.rho0 {
            h.update(p.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Free-function form of [`FiniteMdp::validate`].
pub fn validate_mdp(mdp: &FiniteMdp) -> Result<(), MdpError> {
    mdp.validate()
}

/// Free-function form of [`FiniteMdp::sample_step`].
pub fn sample_step<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    s: usize,
    a: usize,
    rng: &mut R,
) -> Result<(f64, usize), MdpError> {
    mdp.sample_step(s, a, rng)
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), MdpError> {
    if expected != got {
        return Err(MdpError::ShapeMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_index(what: &'static str, index: usize, bound: usize) -> Result<(), MdpError> {
    if index >= bound {
        return Err(MdpError::IndexOutOfRange { what, index, bound });
    }
    Ok(())
}

/// Inverse-CDF draw from a discrete distribution given by `probs`.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state(gamma: f64, reward: RewardDist) -> FiniteMdp {
        FiniteMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![1.0],
            rewards: vec![reward],
            gamma,
            rho0: vec![1.0],
        }
    }

    #[test]
    fn identity_mdp_is_valid() {
        assert!(validate_mdp(&one_state(0.5, RewardDist::point(0.0))).is_ok());
    }

    #[test]
    fn substochastic_row_rejected() {
        let mut mdp = one_state(0.5, RewardDist::point(0.0));
        mdp.n_states = 2;
        mdp.transition = vec![0.9, 0.0, 0.5, 0.5];
        mdp.rewards = vec![RewardDist::point(0.0); 2];
        mdp.rho0 = vec![1.0, 0.0];
        let err = validate_mdp(&mdp).unwrap_err();
        assert!(err.to_string().contains("row not stochastic"), "{err}");
        match err {
            MdpError::RowNotStochastic {
                state, deviation, ..
            } => {
                assert_eq!(state, 0);
                assert!((deviation - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gamma_one_rejected() {
        let err = validate_mdp(&one_state(1.0, RewardDist::point(0.0))).unwrap_err();
        assert!(err.to_string().contains("gamma out of range"));
    }

    #[test]
    fn bad_rho0_and_reward_rejected() {
        let mut mdp = one_state(0.5, RewardDist::point(0.0));
        mdp.rho0 = vec![0.5];
        assert!(matches!(
            mdp.validate(),
            Err(MdpError::Rho0NotStochastic { .. })
        ));
        let mdp = one_state(0.5, RewardDist::Uniform { lo: 1.0, hi: 1.0 });
        assert!(matches!(
            mdp.validate(),
            Err(MdpError::InvalidReward { .. })
        ));
    }

    #[test]
    fn degenerate_step_is_deterministic() {
        let mdp = FiniteMdp::new(
            3,
            1,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            vec![RewardDist::point(3.0); 3],
            0.9,
            vec![1.0, 0.0, 0.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(mdp.sample_step(0, 0, &mut rng).unwrap(), (3.0, 2));
        }
    }

    #[test]
    fn uniform_reward_stays_in_support() {
        let mdp = one_state(0.5, RewardDist::Uniform { lo: 0.0, hi: 1.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (r, s) = mdp.sample_step(0, 0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&r));
            assert_eq!(s, 0);
        }
    }

    #[test]
    fn same_seed_same_step() {
        let mdp = random_point_mass_mdp(4, 2, 3, 0.9, &mut ChaCha8Rng::seed_from_u64(7));
        let a = mdp
            .sample_step(1, 1, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        let b = mdp
            .sample_step(1, 1, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_step_rejected() {
        let mdp = one_state(0.5, RewardDist::point(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mdp.sample_step(1, 0, &mut rng),
            Err(MdpError::IndexOutOfRange { what: "state", .. })
        ));
        assert!(mdp.sample_step(0, 3, &mut rng).is_err());
    }

    #[test]
    fn hash_changes_with_model() {
        let a = one_state(0.5, RewardDist::point(0.0));
        let b = one_state(0.5, RewardDist::point(1.0));
        assert_eq!(a.hash_hex(), a.clone().hash_hex());
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex().len(), 64);
    }
}
