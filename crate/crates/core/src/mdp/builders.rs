//! Built-in benchmark MDPs.

use rand::Rng;

use super::{FiniteMdp, MdpError, RewardDist};

/// Reward family of the chain benchmark. All three share the same means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainReward {
    Point,
    Uniform,
    /// Two-point mixtures with a rare large loss.
    HeavyTail,
}

impl std::str::FromStr for ChainReward {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point" => Ok(ChainReward::Point),
            "uniform" => Ok(ChainReward::Uniform),
            "heavy" | "heavy_tail" => Ok(ChainReward::HeavyTail),
            other => Err(format!("unknown chain reward {other:?}")),
        }
    }
}

const CHAIN_GOAL: f64 = 1.0;
const CHAIN_EXIT_SCALE: f64 = 0.5;

fn chain_reward(kind: ChainReward, mean: f64, loss: f64, p_loss: f64) -> RewardDist {
    match kind {
        ChainReward::Point => RewardDist::point(mean),
        ChainReward::Uniform => RewardDist::Uniform {
            lo: mean - 0.05,
            hi: mean + 0.05,
        },
        ChainReward::HeavyTail => {
            // mean = (1 - p) * high + p * (high - loss)  =>  high = mean + p * loss
            let high = mean + p_loss * loss;
            RewardDist::PointMassMixture {
                values: vec![high, high - loss],
                weights: vec![1.0 - p_loss, p_loss],
            }
        }
    }
}

/// `n`-state chain started in state 0.
///
/// Action 0 advances one state; advancing from the last state pays the goal
/// reward and restarts at 0. Action 1 exits to state 0 immediately with a
/// reward growing linearly in the current position.
pub fn chain_mdp(n: usize, reward: ChainReward, gamma: f64) -> Result<FiniteMdp, MdpError> {
    if n < 2 {
        return Err(MdpError::ShapeMismatch {
            what: "chain length",
            expected: 2,
            got: n,
        });
    }
    let na = 2;
    let mut transition = vec![0.0; n * na * n];
    let mut rewards = Vec::with_capacity(n * na);
    for s in 0..n {
        let advance_to = if s + 1 == n { 0 } else { s + 1 };
        transition[(s * na) * n + advance_to] = 1.0;
        transition[(s * na + 1) * n] = 1.0;
        let goal = if s + 1 == n { CHAIN_GOAL } else { 0.0 };
        rewards.push(if goal > 0.0 {
            chain_reward(reward, goal, 4.0, 0.25)
        } else {
            RewardDist::point(0.0)
        });
        let exit = CHAIN_EXIT_SCALE * (s + 1) as f64 / n as f64;
        rewards.push(chain_reward(reward, exit, 5.0, 0.1));
    }
    let mut rho0 = vec![0.0; n];
    rho0[0] = 1.0;
    FiniteMdp::new(n, na, transition, rewards, gamma, rho0)
}

/// Slippery gridworld with four actions (up, right, down, left).
///
/// The agent starts in the bottom-left cell and the goal is the bottom-right
/// cell. Each move slips to a uniformly random direction with probability
/// 0.1. With `cliff`, the bottom-row cells between start and goal cost -10
/// and send the agent back to the start. Steps cost -0.1; reaching the goal
/// pays +1 and restarts.
pub fn gridworld_mdp(
    width: usize,
    height: usize,
    cliff: bool,
    gamma: f64,
) -> Result<FiniteMdp, MdpError> {
    if width < 2 || height < 1 {
        return Err(MdpError::ShapeMismatch {
            what: "grid size",
            expected: 2,
            got: width.min(height),
        });
    }
    let ns = width * height;
    let na = 4;
    let idx = |x: usize, y: usize| y * width + x;
    let start = idx(0, 0);
    let goal = idx(width - 1, 0);
    let is_cliff = |x: usize, y: usize| cliff && y == 0 && x > 0 && x + 1 < width;
    let slip = 0.1;
    let mut transition = vec![0.0; ns * na * ns];
    let mut rewards = Vec::with_capacity(ns * na);
    let moves: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    for y in 0..height {
        for x in 0..width {
            let s = idx(x, y);
            for a in 0..na {
                let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
                for (d, (dx, dy)) in moves.iter().enumerate() {
                    let p = if d == a { 1.0 - slip } else { 0.0 } + slip / 4.0;
                    let next = if s == goal {
                        start
                    } else {
                        let nx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                        let ny = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                        if is_cliff(nx, ny) {
                            start
                        } else {
                            idx(nx, ny)
                        }
                    };
                    row[next] += p;
                }
                rewards.push(gridworld_reward(s == goal, x, y, a, width, height, &is_cliff));
            }
        }
    }
    let mut rho0 = vec![0.0; ns];
    rho0[start] = 1.0;
    FiniteMdp::new(ns, na, transition, rewards, gamma, rho0)
}

fn gridworld_reward(
    at_goal: bool,
    x: usize,
    y: usize,
    a: usize,
    width: usize,
    height: usize,
    is_cliff: &dyn Fn(usize, usize) -> bool,
) -> RewardDist {
    if at_goal {
        return RewardDist::point(1.0);
    }
    // Rewards depend on the realized move, which the model cannot express
    // per next state, so the cliff penalty enters as a mixture over slips.
    let moves: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    let slip = 0.1;
    let mut p_cliff = 0.0;
    for (d, (dx, dy)) in moves.iter().enumerate() {
        let p = if d == a { 1.0 - slip } else { 0.0 } + slip / 4.0;
        let nx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
        let ny = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
        if is_cliff(nx, ny) {
            p_cliff += p;
        }
    }
    if p_cliff <= 0.0 {
        RewardDist::point(-0.1)
    } else if p_cliff >= 1.0 {
        RewardDist::point(-10.0)
    } else {
        RewardDist::PointMassMixture {
            values: vec![-0.1, -10.0],
            weights: vec![1.0 - p_cliff, p_cliff],
        }
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // -ln(U) draws give a flat Dirichlet.
    let mut w: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3)
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    w
}

/// Random MDP with point-mass-mixture rewards on `[-1, 1]` and random `rho0`.
pub fn random_point_mass_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    n_reward_atoms: usize,
    gamma: f64,
    rng: &mut R,
) -> FiniteMdp {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    let mut rewards = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        transition.extend(random_simplex(n_states, rng));
        let values = (0..n_reward_atoms.max(1))
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let weights = random_simplex(n_reward_atoms.max(1), rng);
        rewards.push(RewardDist::PointMassMixture { values, weights });
    }
    let rho0 = random_simplex(n_states, rng);
    FiniteMdp::new(n_states, n_actions, transition, rewards, gamma, rho0)
        .expect("random construction is valid")
}

/// Random MDP whose rewards are `Uniform(lo, lo + width)` with `lo` in `[-1, 0]`
/// and `width` in `[0.5, 1]`.
pub fn random_uniform_reward_mdp<R: Rng + ?Sized>(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rng: &mut R,
) -> FiniteMdp {
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    let mut rewards = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        transition.extend(random_simplex(n_states, rng));
        let lo = rng.random_range(-1.0..=0.0);
        let width = rng.random_range(0.5..=1.0);
        rewards.push(RewardDist::Uniform { lo, hi: lo + width });
    }
    let rho0 = random_simplex(n_states, rng);
    FiniteMdp::new(n_states, n_actions, transition, rewards, gamma, rho0)
        .expect("random construction is valid")
}
