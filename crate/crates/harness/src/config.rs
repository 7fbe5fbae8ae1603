//! Flat `key = value` configuration with `[section]` headers.
//!
//! Every key belongs to one section but names are unique across sections, so
//! overrides may use either `beta=0.3` or `algo.beta=0.3`. Blank lines and
//! text after `#` are ignored.

use std::path::{Path, PathBuf};

use dde_core::control::{DdacConfig, Score};
use dde_core::ensemble::{NextAction, PessimismShape};
use dde_core::mdp::{
    chain_mdp, gridworld_mdp, random_point_mass_mdp, random_uniform_reward_mdp, ChainReward, FiniteMdp, Policy,
    SamplingScheme,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown key {0:?}")]
    UnknownKey(String),

    #[error("invalid value {value:?} for {key}: {msg}")]
    InvalidValue { key: String, value: String, msg: String },

    #[error("override {0:?} is not of the form key=value")]
    BadOverride(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("model construction failed: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MdpSection {
    /// `chain`, `gridworld`, `random` or `reference`.
    pub kind: String,
    pub gamma: f64,
    pub chain_states: usize,
    /// `point`, `uniform` or `heavy`.
    pub chain_reward: String,
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid_cliff: bool,
    pub random_states: usize,
    pub random_actions: usize,
    /// Atoms per point-mass reward; 0 gives uniform rewards.
    pub random_reward_atoms: usize,
    pub random_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSection {
    pub n_tuples: usize,
    /// `iid` or `trajectories`.
    pub scheme: String,
    pub trajectory_horizon: usize,
    /// Probability the behavior policy puts on `favored_action`; the rest is
    /// spread evenly over the other actions. 0 means uniform.
    pub behavior_skew: f64,
    pub favored_action: usize,
    /// Read the dataset from this file instead of generating it.
    pub dataset_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgoSection {
    pub members: usize,
    pub atoms: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub kappa_huber: f64,
    pub kappa_polyak: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    /// `mean` or `cvar:<level>`.
    pub score: String,
    /// `distorted` or `uniform`.
    pub shape: String,
    /// `enumerate` or `sample`.
    pub next_action: String,
    pub bootstrap: bool,
    pub clamp_targets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheorySection {
    pub contraction_pairs: usize,
    pub sandwich_instances: usize,
    pub sandwich_atoms: usize,
    pub sandwich_tol: f64,
    pub clt_taus: Vec<f64>,
    pub clt_n: usize,
    pub clt_replicates: usize,
    pub conc_tau: f64,
    pub conc_n: usize,
    pub conc_delta: f64,
    pub conc_replicates: usize,
    pub oracle_mdps: usize,
    pub oracle_rollouts: usize,
    pub regression_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSection {
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub mdp: MdpSection,
    pub data: DataSection,
    pub algo: AlgoSection,
    pub theory: TheorySection,
    pub compare: CompareSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            mdp: MdpSection {
                kind: "chain".into(),
                gamma: 0.9,
                chain_states: 10,
                chain_reward: "heavy".into(),
                grid_width: 4,
                grid_height: 3,
                grid_cliff: true,
                random_states: 5,
                random_actions: 3,
                random_reward_atoms: 2,
                random_seed: 0,
            },
            data: DataSection {
                n_tuples: 1000,
                scheme: "iid".into(),
                trajectory_horizon: 50,
                behavior_skew: 0.9,
                favored_action: 0,
                dataset_path: None,
            },
            algo: AlgoSection {
                members: 10,
                atoms: 32,
                beta: 0.5,
                learning_rate: 0.1,
                kappa_huber: 1.0,
                kappa_polyak: 0.005,
                epsilon: 0.1,
                steps: 3000,
                batch_size: 64,
                eval_every: 500,
                eval_episodes: 1000,
                eval_horizon: 100,
                score: "mean".into(),
                shape: "distorted".into(),
                next_action: "enumerate".into(),
                bootstrap: true,
                clamp_targets: true,
            },
            theory: TheorySection {
                contraction_pairs: 200,
                sandwich_instances: 20,
                sandwich_atoms: 128,
                sandwich_tol: 1e-6,
                clt_taus: vec![0.1, 0.5, 0.9],
                clt_n: 4096,
                clt_replicates: 5000,
                conc_tau: 0.5,
                conc_n: 4096,
                conc_delta: 0.1,
                conc_replicates: 1000,
                oracle_mdps: 5,
                oracle_rollouts: 100_000,
                regression_steps: 1500,
            },
            compare: CompareSection { seeds: 10 },
        }
    }
}

const SECTIONS: [&str; 5] = ["mdp", "data", "algo", "theory", "compare"];

fn section_of(key: &str) -> Option<&'static str> {
    let s = match key {
        "kind" | "gamma" | "chain_states" | "chain_reward" | "grid_width" | "grid_height" | "grid_cliff"
        | "random_states" | "random_actions" | "random_reward_atoms" | "random_seed" => "mdp",
        "n_tuples" | "scheme" | "trajectory_horizon" | "behavior_skew" | "favored_action" | "dataset_path" => "data",
        "members" | "atoms" | "beta" | "learning_rate" | "kappa_huber" | "kappa_polyak" | "epsilon" | "steps"
        | "batch_size" | "eval_every" | "eval_episodes" | "eval_horizon" | "score" | "shape" | "next_action"
        | "bootstrap" | "clamp_targets" => "algo",
        "contraction_pairs" | "sandwich_instances" | "sandwich_atoms" | "sandwich_tol" | "clt_taus" | "clt_n"
        | "clt_replicates" | "conc_tau" | "conc_n" | "conc_delta" | "conc_replicates" | "oracle_mdps"
        | "oracle_rollouts" | "regression_steps" => "theory",
        "seeds" => "compare",
        _ => return None,
    };
    Some(s)
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        msg: e.to_string(),
    })
}

fn parse_choice(key: &str, value: &str, allowed: &[&str]) -> Result<String, ConfigError> {
    if allowed.contains(&value) {
        Ok(value.into())
    } else {
        Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            msg: format!("expected one of {allowed:?}"),
        })
    }
}

impl Config {
    /// Sets `key` (bare or `section.key`) from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bare = match key.split_once('.') {
            Some((sec, k)) if section_of(k) == Some(sec) => k,
            None if section_of(key).is_some() => key,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        };
        let v = value.trim();
        let m = &mut self.mdp;
        let d = &mut self.data;
        let a = &mut self.algo;
        let t = &mut self.theory;
        match bare {
            "kind" => m.kind = parse_choice(bare, v, &["chain", "gridworld", "random", "reference"])?,
            "gamma" => m.gamma = parse_val(bare, v)?,
            "chain_states" => m.chain_states = parse_val(bare, v)?,
            "chain_reward" => m.chain_reward = parse_choice(bare, v, &["point", "uniform", "heavy"])?,
            "grid_width" => m.grid_width = parse_val(bare, v)?,
            "grid_height" => m.grid_height = parse_val(bare, v)?,
            "grid_cliff" => m.grid_cliff = parse_val(bare, v)?,
            "random_states" => m.random_states = parse_val(bare, v)?,
            "random_actions" => m.random_actions = parse_val(bare, v)?,
            "random_reward_atoms" => m.random_reward_atoms = parse_val(bare, v)?,
            "random_seed" => m.random_seed = parse_val(bare, v)?,
            "n_tuples" => d.n_tuples = parse_val(bare, v)?,
            "scheme" => d.scheme = parse_choice(bare, v, &["iid", "trajectories"])?,
            "trajectory_horizon" => d.trajectory_horizon = parse_val(bare, v)?,
            "behavior_skew" => d.behavior_skew = parse_val(bare, v)?,
            "favored_action" => d.favored_action = parse_val(bare, v)?,
            "dataset_path" => d.dataset_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "members" => a.members = parse_val(bare, v)?,
            "atoms" => a.atoms = parse_val(bare, v)?,
            "beta" => a.beta = parse_val(bare, v)?,
            "learning_rate" => a.learning_rate = parse_val(bare, v)?,
            "kappa_huber" => a.kappa_huber = parse_val(bare, v)?,
            "kappa_polyak" => a.kappa_polyak = parse_val(bare, v)?,
            "epsilon" => a.epsilon = parse_val(bare, v)?,
            "steps" => a.steps = parse_val(bare, v)?,
            "batch_size" => a.batch_size = parse_val(bare, v)?,
            "eval_every" => a.eval_every = parse_val(bare, v)?,
            "eval_episodes" => a.eval_episodes = parse_val(bare, v)?,
            "eval_horizon" => a.eval_horizon = parse_val(bare, v)?,
            "score" => {
                parse_score(v)?;
                a.score = v.into();
            }
            "shape" => a.shape = parse_choice(bare, v, &["distorted", "uniform"])?,
            "next_action" => a.next_action = parse_choice(bare, v, &["enumerate", "sample"])?,
            "bootstrap" => a.bootstrap = parse_val(bare, v)?,
            "clamp_targets" => a.clamp_targets = parse_val(bare, v)?,
            "contraction_pairs" => t.contraction_pairs = parse_val(bare, v)?,
            "sandwich_instances" => t.sandwich_instances = parse_val(bare, v)?,
            "sandwich_atoms" => t.sandwich_atoms = parse_val(bare, v)?,
            "sandwich_tol" => t.sandwich_tol = parse_val(bare, v)?,
            "clt_taus" => {
                t.clt_taus = v
                    .split(',')
                    .map(|x| parse_val::<f64>(bare, x.trim()))
                    .collect::<Result<_, _>>()?
            }
            "clt_n" => t.clt_n = parse_val(bare, v)?,
            "clt_replicates" => t.clt_replicates = parse_val(bare, v)?,
            "conc_tau" => t.conc_tau = parse_val(bare, v)?,
            "conc_n" => t.conc_n = parse_val(bare, v)?,
            "conc_delta" => t.conc_delta = parse_val(bare, v)?,
            "conc_replicates" => t.conc_replicates = parse_val(bare, v)?,
            "oracle_mdps" => t.oracle_mdps = parse_val(bare, v)?,
            "oracle_rollouts" => t.oracle_rollouts = parse_val(bare, v)?,
            "regression_steps" => t.regression_steps = parse_val(bare, v)?,
            "seeds" => self.compare.seeds = parse_val(bare, v)?,
            _ => unreachable!("section_of covers every key"),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    line: line_no,
                    msg: format!("unterminated section header {line:?}"),
                })?;
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::Parse { line: line_no, msg: format!("unknown section {name:?}") });
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            let key = match &section {
                Some(sec) => format!("{sec}.{k}"),
                None => k.to_string(),
            };
            cfg.set(&key, v).map_err(|e| ConfigError::Parse { line: line_no, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn build_mdp(&self) -> Result<FiniteMdp, ConfigError> {
        let m = &self.mdp;
        let err = |e: dde_core::mdp::MdpError| ConfigError::Model(e.to_string());
        match m.kind.as_str() {
            "chain" => {
                let reward: ChainReward = m.chain_reward.parse().map_err(ConfigError::Model)?;
                chain_mdp(m.chain_states, reward, m.gamma).map_err(err)
            }
            "gridworld" => gridworld_mdp(m.grid_width, m.grid_height, m.grid_cliff, m.gamma).map_err(err),
            "random" => {
                let mut rng = ChaCha8Rng::seed_from_u64(m.random_seed);
                if m.random_states == 0 || m.random_actions == 0 {
                    return Err(ConfigError::Model("random model needs states and actions".into()));
                }
                if !(m.gamma > 0.0 && m.gamma < 1.0) {
                    return Err(ConfigError::Model(format!("gamma {}", m.gamma)));
                }
                Ok(if m.random_reward_atoms == 0 {
                    random_uniform_reward_mdp(m.random_states, m.random_actions, m.gamma, &mut rng)
                } else {
                    random_point_mass_mdp(m.random_states, m.random_actions, m.random_reward_atoms, m.gamma, &mut rng)
                })
            }
            "reference" => Ok(dde_core::theory::reference_mdp()),
            other => Err(ConfigError::Model(format!("unknown kind {other}"))),
        }
    }

    pub fn behavior_policy(&self, mdp: &FiniteMdp) -> Result<Policy, ConfigError> {
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let d = &self.data;
        if d.behavior_skew == 0.0 || na == 1 {
            return Ok(Policy::uniform(ns, na));
        }
        if d.favored_action >= na || !(d.behavior_skew > 0.0 && d.behavior_skew <= 1.0) {
            return Err(ConfigError::Model(format!(
                "behavior skew {} on action {} with {na} actions",
                d.behavior_skew, d.favored_action
            )));
        }
        let rest = (1.0 - d.behavior_skew) / (na - 1) as f64;
        let mut probs = Vec::with_capacity(ns * na);
        for _ in 0..ns {
            probs.extend((0..na).map(|a| if a == d.favored_action { d.behavior_skew } else { rest }));
        }
        Policy::new(ns, na, probs).map_err(|e| ConfigError::Model(e.to_string()))
    }

    /// i.i.d. mode draws states uniformly and actions from the behavior policy.
    pub fn sampling_scheme(&self, behavior: &Policy) -> SamplingScheme {
        match self.data.scheme.as_str() {
            "trajectories" => SamplingScheme::Trajectories { horizon: self.data.trajectory_horizon },
            _ => {
                let ns = behavior.n_states();
                SamplingScheme::IidFromWeights(
                    (0..ns).flat_map(|s| behavior.row(s).iter().map(move |p| p / ns as f64)).collect(),
                )
            }
        }
    }

    pub fn ddac(&self, gamma: f64) -> Result<DdacConfig, ConfigError> {
        let a = &self.algo;
        Ok(DdacConfig {
            members: a.members,
            atoms: a.atoms,
            beta: a.beta,
            gamma,
            learning_rate: a.learning_rate,
            kappa_huber: a.kappa_huber,
            kappa_polyak: a.kappa_polyak,
            epsilon: a.epsilon,
            steps: a.steps,
            batch_size: a.batch_size,
            eval_every: a.eval_every,
            eval_episodes: a.eval_episodes,
            eval_horizon: a.eval_horizon,
            score: parse_score(&a.score)?,
            shape: if a.shape == "uniform" { PessimismShape::Uniform } else { PessimismShape::Distorted },
            next_action: if a.next_action == "sample" { NextAction::Sample } else { NextAction::Enumerate },
            bootstrap: a.bootstrap,
            clamp_targets: a.clamp_targets,
            init: None,
        })
    }
}

pub fn parse_score(v: &str) -> Result<Score, ConfigError> {
    let bad = |msg: &str| ConfigError::InvalidValue { key: "score".into(), value: v.into(), msg: msg.into() };
    if v == "mean" {
        return Ok(Score::Mean);
    }
    let level = v.strip_prefix("cvar:").ok_or_else(|| bad("expected mean or cvar:<level>"))?;
    let alpha: f64 = level.parse().map_err(|_| bad("level is not a number"))?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(bad("level must lie in (0, 1]"));
    }
    Ok(Score::Cvar(alpha))
}
