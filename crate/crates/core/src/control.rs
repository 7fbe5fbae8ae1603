//! Tabular distorted distributional actor critic for discrete actions.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ensemble::{
    init_ensemble, Ensemble, EnsembleConfig, EnsembleError, InitScheme, NextAction, PessimismShape,
    TargetFallback,
};
use crate::mdp::{sample_index, FiniteMdp, MdpError, OfflineDataset, Policy, Transition};
use crate::quantile::{cvar_lower, cvar_lower_sorted, TableShape};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("CVaR level must lie in (0, 1], got {0}")]
    RiskLevel(f64),

    #[error("epsilon must lie in [0, 1], got {0}")]
    Epsilon(f64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no episodes requested")]
    NoEpisodes,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Ensemble(#[from] EnsembleError),

    #[error(transparent)]
    Mdp(#[from] MdpError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `Q(s, a) = (1 / LM) sum_l sum_m Z_l(s, a, m)` over the online tables.
pub fn q_value(ens: &Ensemble, s: usize, a: usize) -> f64 {
    let total: f64 = ens.online.iter().map(|t| t.row(s, a).iter().sum::<f64>()).sum();
    total / (ens.online.len() * ens.shape().n_atoms) as f64
}

/// Member-averaged lower CVaR at level `alpha` of the atom distribution.
pub fn risk_q(ens: &Ensemble, s: usize, a: usize, alpha: f64) -> Result<f64, ControlError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ControlError::RiskLevel(alpha));
    }
    let total: f64 = ens.online.iter().map(|t| cvar_lower_sorted(t.row(s, a), alpha)).sum();
    Ok(total / ens.online.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Score {
    Mean,
    Cvar(f64),
}

/// Per-pair scores the greedy step maximizes.
///
/// The critic is read through the same distortion used in its targets, so a
/// score is the chosen statistic of `Q_phi Z` with `phi = beta * sigma_hat`.
/// With `beta = 0` this is exactly [`q_value`] or [`risk_q`]. Pairs never
/// touched by data keep their initial spread and so carry a large penalty.
pub fn action_scores(ens: &Ensemble, mode: Score) -> Result<Vec<f64>, ControlError> {
    let shape = ens.shape();
    let beta = ens.config.beta;
    let penalty: Vec<f64> = if beta > 0.0 && ens.len() >= 2 {
        let stats = ens.stats();
        (0..shape.n_pairs())
            .map(|p| {
                let row = &stats.sigma[p * shape.n_atoms..(p + 1) * shape.n_atoms];
                beta * row.iter().sum::<f64>() / shape.n_atoms as f64
            })
            .collect()
    } else {
        vec![0.0; shape.n_pairs()]
    };
    let mut out = Vec::with_capacity(shape.n_pairs());
    for s in 0..shape.n_states {
        for a in 0..shape.n_actions {
            let base = match mode {
                Score::Mean => q_value(ens, s, a),
                Score::Cvar(alpha) => risk_q(ens, s, a, alpha)?,
            };
            out.push(base - penalty[s * shape.n_actions + a]);
        }
    }
    Ok(out)
}

/// Epsilon-greedy policy over row-major `scores`; ties go to the lowest index.
pub fn epsilon_greedy(scores: &[f64], n_states: usize, n_actions: usize, epsilon: f64) -> Result<Policy, ControlError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(ControlError::Epsilon(epsilon));
    }
    let explore = epsilon / n_actions as f64;
    let mut probs = vec![explore; n_states * n_actions];
    for s in 0..n_states {
        let row = &scores[s * n_actions..(s + 1) * n_actions];
        let mut best = 0;
        for (a, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = a;
            }
        }
        probs[s * n_actions + best] += 1.0 - epsilon;
    }
    Ok(Policy::new(n_states, n_actions, probs)?)
}

pub fn greedy_policy(ens: &Ensemble, mode: Score, epsilon: f64) -> Result<Policy, ControlError> {
    let shape = ens.shape();
    epsilon_greedy(&action_scores(ens, mode)?, shape.n_states, shape.n_actions, epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub mean: f64,
    pub cvar10: f64,
    pub samples: Vec<f64>,
}

/// Discounted returns of `n_episodes` rollouts from `rho0`, truncated at
/// `horizon`. Episode `k` uses stream `k` of a generator seeded from `rng`.
pub fn evaluate_policy<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &Policy,
    n_episodes: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<Evaluation, ControlError> {
    if n_episodes == 0 {
        return Err(ControlError::NoEpisodes);
    }
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(MdpError::ShapeMismatch {
            what: "policy",
            expected: mdp.n_states * mdp.n_actions,
            got: policy.n_states() * policy.n_actions(),
        }
        .into());
    }
    let seed: u64 = rng.random();
    let samples: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k as u64);
            let mut s = sample_index(&mdp.rho0, &mut r);
            let (mut ret, mut disc) = (0.0, 1.0);
            for _ in 0..horizon {
                let a = policy.sample(s, &mut r);
                let (rew, s2) = mdp.sample_step_unchecked(s, a, &mut r);
                ret += disc * rew;
                disc *= mdp.gamma;
                s = s2;
            }
            ret
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n_episodes as f64;
    let cvar10 = cvar_lower(&samples, 0.1);
    Ok(Evaluation { mean, cvar10, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DdacConfig {
    pub members: usize,
    pub atoms: usize,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub kappa_huber: f64,
    pub kappa_polyak: f64,
    /// Exploration used by the target policy during training.
    pub epsilon: f64,
    pub steps: usize,
    /// Tuples per step drawn with replacement; 0 uses the whole dataset.
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    pub score: Score,
    pub shape: PessimismShape,
    pub next_action: NextAction,
    pub bootstrap: bool,
    /// Clip targets to `[-V, V]`, `V = max |r| / (1 - gamma)`.
    pub clamp_targets: bool,
    /// Initial atoms; `None` means uniform on `[-V, V]`.
    pub init: Option<InitScheme>,
}

impl Default for DdacConfig {
    fn default() -> Self {
        Self {
            members: 10,
            atoms: 32,
            beta: 0.5,
            gamma: 0.9,
            learning_rate: 0.1,
            kappa_huber: 1.0,
            kappa_polyak: 0.005,
            epsilon: 0.1,
            steps: 5000,
            batch_size: 64,
            eval_every: 500,
            eval_episodes: 1000,
            eval_horizon: 100,
            score: Score::Mean,
            shape: PessimismShape::Distorted,
            next_action: NextAction::Enumerate,
            bootstrap: false,
            clamp_targets: true,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub mean_return: f64,
    pub cvar10: f64,
    pub mean_q: f64,
    pub mean_sigma: f64,
}

pub const METRICS_HEADER: &str = "step,mean_return,cvar10,mean_q,mean_sigma";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.10e},{:.10e},{:.10e},{:.10e}",
            r.step, r.mean_return, r.cvar10, r.mean_q, r.mean_sigma
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DdacRun {
    pub ensemble: Ensemble,
    /// Epsilon-greedy policy at the training epsilon.
    pub policy: Policy,
    pub metrics: Vec<MetricRow>,
}

fn mean_q(ens: &Ensemble) -> f64 {
    let shape = ens.shape();
    let mut acc = 0.0;
    for s in 0..shape.n_states {
        for a in 0..shape.n_actions {
            acc += q_value(ens, s, a);
        }
    }
    acc / shape.n_pairs() as f64
}

fn metric_row<R: Rng + ?Sized>(
    step: usize,
    ens: &Ensemble,
    cfg: &DdacConfig,
    eval: Option<&FiniteMdp>,
    rng: &mut R,
) -> Result<MetricRow, ControlError> {
    let (mean_return, cvar10) = match eval {
        Some(mdp) => {
            let greedy = greedy_policy(ens, cfg.score, 0.0)?;
            let e = evaluate_policy(mdp, &greedy, cfg.eval_episodes, cfg.eval_horizon, rng)?;
            (e.mean, e.cvar10)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok(MetricRow {
        step,
        mean_return,
        cvar10,
        mean_q: mean_q(ens),
        mean_sigma: ens.stats().mean_sigma(),
    })
}

/// Offline training: each step regresses every member on a batch toward
/// distorted targets under the current epsilon-greedy policy, mixes the
/// targets, then refreshes the policy. Next pairs absent from the data
/// contribute the worst-case return `-V` in place of `mu_hat`.
///
/// When `eval` is given, the greedy policy is rolled out at step 0, every
/// `eval_every` steps and at the last step; evaluation draws from its own
/// generator so it never perturbs training.
pub fn train_ddac_tabular<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    cfg: &DdacConfig,
    eval: Option<&FiniteMdp>,
    rng: &mut R,
) -> Result<DdacRun, ControlError> {
    if dataset.is_empty() {
        return Err(ControlError::EmptyDataset);
    }
    if cfg.atoms == 0 {
        return Err(ControlError::InvalidConfig("atoms must be positive".into()));
    }
    if let Score::Cvar(alpha) = cfg.score {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ControlError::RiskLevel(alpha));
        }
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(ControlError::Epsilon(cfg.epsilon));
    }
    if eval.is_some() && cfg.eval_episodes == 0 {
        return Err(ControlError::NoEpisodes);
    }
    let shape = TableShape::new(dataset.n_states(), dataset.n_actions(), cfg.atoms);
    let v = dataset.max_abs_reward() / (1.0 - cfg.gamma);
    let ecfg = EnsembleConfig {
        beta: cfg.beta,
        gamma: cfg.gamma,
        kappa_huber: cfg.kappa_huber,
        kappa_polyak: cfg.kappa_polyak,
        learning_rate: cfg.learning_rate,
        next_action: cfg.next_action,
        shape: cfg.shape,
        bootstrap: cfg.bootstrap,
        target_clamp: cfg.clamp_targets.then_some((-v, v)),
    };
    let init = cfg.init.unwrap_or(InitScheme::UniformRandom { lo: -v, hi: v });
    let mut ens = init_ensemble(cfg.members, shape, init, ecfg, rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let fallback = TargetFallback::from_counts(dataset.counts(), -v);
    let mut policy = greedy_policy(&ens, cfg.score, cfg.epsilon)?;
    let mut metrics = Vec::new();
    let logging = cfg.eval_every > 0;
    if logging {
        metrics.push(metric_row(0, &ens, cfg, eval, &mut eval_rng)?);
    }
    let tuples = dataset.tuples();
    let mut batch: Vec<Transition> = Vec::with_capacity(cfg.batch_size);
    for step in 1..=cfg.steps {
        let batch_ref: &[Transition] = if cfg.batch_size == 0 {
            tuples
        } else {
            batch.clear();
            batch.extend((0..cfg.batch_size).map(|_| tuples[rng.random_range(0..tuples.len())]));
            &batch
        };
        ens.regression_step(batch_ref, &policy, Some(&fallback), rng)?;
        ens.polyak_update();
        policy = greedy_policy(&ens, cfg.score, cfg.epsilon)?;
        if logging && (step % cfg.eval_every == 0 || step == cfg.steps) {
            metrics.push(metric_row(step, &ens, cfg, eval, &mut eval_rng)?);
        }
    }
    Ok(DdacRun {
        ensemble: ens,
        policy,
        metrics,
    })
}
