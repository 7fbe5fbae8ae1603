//! Ensemble of tabular quantile critics with `phi = beta * sigma_hat`.
//!
//! Each member regresses onto the distorted target
//! `r + gamma * mu_hat(s', a', j) - beta * sigma_hat(s, a, j)` with the
//! quantile Huber loss. `mu_hat` and `sigma_hat` are the mean and the
//! population standard deviation over the slowly mixed target tables.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distortion::{DistortionError, DistortionTable};
use crate::mdp::{MdpError, Policy, Transition};
use crate::quantile::{tau_hats, QuantileError, QuantileHuber, QuantileTable, TableShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Quantile(#[from] QuantileError),

    #[error(transparent)]
    Distortion(#[from] DistortionError),

    #[error(transparent)]
    Mdp(#[from] MdpError),
}

impl From<std::io::Error> for EnsembleError {
    fn from(e: std::io::Error) -> Self {
        EnsembleError::Checkpoint(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitScheme {
    UniformRandom { lo: f64, hi: f64 },
    Constant(f64),
}

/// How `a'` enters the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NextAction {
    /// One draw from `pi(.|s')` per tuple, member and step.
    Sample,
    /// Exact average over `pi(.|s')`.
    Enumerate,
}

/// Shape of the pessimism term inside the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PessimismShape {
    /// `beta * sigma_hat(s, a, j)`, level dependent.
    Distorted,
    /// `beta * mean_j sigma_hat(s, a, j)` for every level.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub beta: f64,
    pub gamma: f64,
    pub kappa_huber: f64,
    pub kappa_polyak: f64,
    pub learning_rate: f64,
    pub next_action: NextAction,
    pub shape: PessimismShape,
    /// Each member sees its own resample of the batch.
    pub bootstrap: bool,
    /// Targets are clipped to this interval when set.
    pub target_clamp: Option<(f64, f64)>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            gamma: 0.9,
            kappa_huber: 1.0,
            kappa_polyak: 0.005,
            learning_rate: 0.1,
            next_action: NextAction::Sample,
            shape: PessimismShape::Distorted,
            bootstrap: false,
            target_clamp: None,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidParameter(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta = {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma = {}", self.gamma));
        }
        if !(self.kappa_huber > 0.0 && self.kappa_huber.is_finite()) {
            return bad(format!("kappa_huber = {}", self.kappa_huber));
        }
        if !(self.kappa_polyak > 0.0 && self.kappa_polyak <= 1.0) {
            return bad(format!("kappa_polyak = {}", self.kappa_polyak));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {}", self.learning_rate));
        }
        if let Some((lo, hi)) = self.target_clamp {
            if !(lo <= hi) {
                return bad(format!("target clamp [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// `mu_hat` and `sigma_hat` over ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaTable {
    pub shape: TableShape,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl SigmaTable {
    #[inline]
    pub fn mu(&self, s: usize, a: usize, j: usize) -> f64 {
        self.mu[self.shape.offset(s, a) + j]
    }

    #[inline]
    pub fn sigma(&self, s: usize, a: usize, j: usize) -> f64 {
        self.sigma[self.shape.offset(s, a) + j]
    }

    pub fn mu_row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.shape.offset(s, a);
        &self.mu[o..o + self.shape.n_atoms]
    }

    pub fn sigma_row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.shape.offset(s, a);
        &self.sigma[o..o + self.shape.n_atoms]
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sigma.iter().sum::<f64>() / self.sigma.len() as f64
    }
}

/// Entrywise mean and population standard deviation over the tables.
pub fn ensemble_stats(tables: &[QuantileTable]) -> Result<SigmaTable, EnsembleError> {
    if tables.len() < 2 {
        return Err(EnsembleError::TooFewMembers(tables.len()));
    }
    let shape = tables[0].shape();
    if tables.iter().any(|t| t.shape() != shape) {
        return Err(EnsembleError::ShapeMismatch("members differ in shape".into()));
    }
    let l = tables.len() as f64;
    let mut mu = vec![0.0; shape.len()];
    for t in tables {
        for (m, z) in mu.iter_mut().zip(t.atoms()) {
            *m += z;
        }
    }
    mu.iter_mut().for_each(|m| *m /= l);
    let mut var = vec![0.0; shape.len()];
    for t in tables {
        for ((v, z), m) in var.iter_mut().zip(t.atoms()).zip(&mu) {
            *v += (z - m) * (z - m);
        }
    }
    let sigma = var.into_iter().map(|v| (v / l).sqrt()).collect();
    Ok(SigmaTable { shape, mu, sigma })
}

/// `phi = beta * sigma_hat`.
pub fn build_phi(stats: &SigmaTable, beta: f64) -> Result<DistortionTable, EnsembleError> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(EnsembleError::InvalidParameter(format!("beta = {beta}")));
    }
    Ok(DistortionTable::new(
        stats.shape,
        stats.sigma.iter().map(|s| beta * s).collect(),
        true,
    )?)
}

/// `r + gamma * mu_hat(s', a', j) - beta * sigma_hat(s, a, j)`.
#[allow(clippy::too_many_arguments)]
pub fn distorted_target(
    stats: &SigmaTable,
    beta: f64,
    gamma: f64,
    r: f64,
    s: usize,
    a: usize,
    s_next: usize,
    a_next: usize,
    j: usize,
) -> f64 {
    r + gamma * stats.mu(s_next, a_next, j) - beta * stats.sigma(s, a, j)
}

/// Next pairs without data: their `mu_hat` is replaced by `value` in targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFallback {
    pub covered: Vec<bool>,
    pub value: f64,
}

impl TargetFallback {
    pub fn from_counts(counts: &[usize], value: f64) -> Self {
        Self {
            covered: counts.iter().map(|c| *c > 0).collect(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub online: Vec<QuantileTable>,
    pub targets: Vec<QuantileTable>,
    pub config: EnsembleConfig,
    pub steps: u64,
}

/// `L` independently initialized members; targets start as copies.
pub fn init_ensemble<R: Rng + ?Sized>(
    l: usize,
    shape: TableShape,
    scheme: InitScheme,
    config: EnsembleConfig,
    rng: &mut R,
) -> Result<Ensemble, EnsembleError> {
    if l < 2 {
        return Err(EnsembleError::TooFewMembers(l));
    }
    config.validate()?;
    let mut online = Vec::with_capacity(l);
    for _ in 0..l {
        let atoms = match scheme {
            InitScheme::Constant(c) => vec![c; shape.len()],
            InitScheme::UniformRandom { lo, hi } => {
                if !(lo <= hi) {
                    return Err(EnsembleError::InvalidParameter(format!("init range [{lo}, {hi}]")));
                }
                (0..shape.len())
                    .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
                    .collect()
            }
        };
        online.push(QuantileTable::new(shape, atoms)?);
    }
    let targets = online.clone();
    Ok(Ensemble {
        online,
        targets,
        config,
        steps: 0,
    })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online.is_empty()
    }

    pub fn shape(&self) -> TableShape {
        self.online[0].shape()
    }

    /// Statistics of the target tables.
    pub fn stats(&self) -> SigmaTable {
        ensemble_stats(&self.targets).expect("ensemble invariant: L >= 2")
    }

    /// Per-pair, per-level pessimism used in targets, after the shape rule.
    fn penalty(&self, stats: &SigmaTable) -> Vec<f64> {
        let beta = self.config.beta;
        match self.config.shape {
            PessimismShape::Distorted => stats.sigma.iter().map(|s| beta * s).collect(),
            PessimismShape::Uniform => {
                let m = stats.shape.n_atoms;
                stats
                    .sigma
                    .chunks(m)
                    .flat_map(|row| {
                        let c = beta * row.iter().sum::<f64>() / m as f64;
                        std::iter::repeat_n(c, m)
                    })
                    .collect()
            }
        }
    }

    /// One gradient step of every member on `batch`.
    ///
    /// Statistics are snapshotted once from the target tables before any
    /// member moves. The step applied to `Z(s, a, i)` is the learning rate
    /// times the negative loss gradient averaged over the batch tuples at
    /// `(s, a)`. Members draw from independent streams seeded from `rng`.
    pub fn regression_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Transition],
        pi: &Policy,
        fallback: Option<&TargetFallback>,
        rng: &mut R,
    ) -> Result<(), EnsembleError> {
        if batch.is_empty() {
            return Err(EnsembleError::EmptyBatch);
        }
        let shape = self.shape();
        if pi.n_states() != shape.n_states || pi.n_actions() != shape.n_actions {
            return Err(EnsembleError::ShapeMismatch("policy does not match the tables".into()));
        }
        for t in batch {
            crate::mdp::check_index("state", t.s, shape.n_states)?;
            crate::mdp::check_index("action", t.a, shape.n_actions)?;
            crate::mdp::check_index("next state", t.s_next, shape.n_states)?;
        }
        let stats = self.stats();
        let penalty = self.penalty(&stats);
        let huber = QuantileHuber::new(self.config.kappa_huber).map_err(EnsembleError::from)?;
        let taus = tau_hats(shape.n_atoms);
        let seeds: Vec<u64> = (0..self.len()).map(|_| rng.random()).collect();
        let cfg = self.config.clone();
        for (member, seed) in self.online.iter_mut().zip(seeds) {
            let mut mrng = ChaCha8Rng::seed_from_u64(seed);
            let picks: Vec<usize> = if cfg.bootstrap {
                (0..batch.len()).map(|_| mrng.random_range(0..batch.len())).collect()
            } else {
                (0..batch.len()).collect()
            };
            member_step(member, batch, &picks, pi, &stats, &penalty, &taus, &huber, &cfg, fallback, &mut mrng);
        }
        self.steps += 1;
        Ok(())
    }

    /// `theta_bar <- (1 - kappa) theta_bar + kappa theta`.
    pub fn polyak_update(&mut self) {
        let k = self.config.kappa_polyak;
        for (t, o) in self.targets.iter_mut().zip(&self.online) {
            let on = o.atoms();
            let mut i = 0;
            t.update_rows(|_, _, row| {
                for z in row.iter_mut() {
                    *z = (1.0 - k) * *z + k * on[i];
                    i += 1;
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn member_step(
    member: &mut QuantileTable,
    batch: &[Transition],
    picks: &[usize],
    pi: &Policy,
    stats: &SigmaTable,
    penalty: &[f64],
    taus: &[f64],
    huber: &QuantileHuber,
    cfg: &EnsembleConfig,
    fallback: Option<&TargetFallback>,
    rng: &mut ChaCha8Rng,
) {
    let shape = member.shape();
    let m = shape.n_atoms;
    let inv_m = 1.0 / m as f64;
    let mut grad = vec![0.0; shape.len()];
    let mut hits = vec![0usize; shape.n_pairs()];
    let mut targets = vec![0.0; m];
    let mut weighted: Vec<(usize, f64)> = Vec::with_capacity(shape.n_actions);
    for &b in picks {
        let t = &batch[b];
        let base = shape.offset(t.s, t.a);
        hits[t.s * shape.n_actions + t.a] += 1;
        weighted.clear();
        match cfg.next_action {
            NextAction::Sample => weighted.push((pi.sample(t.s_next, rng), 1.0)),
            NextAction::Enumerate => weighted.extend(
                pi.row(t.s_next)
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| **q > 0.0)
                    .map(|(a2, q)| (a2, *q)),
            ),
        }
        let row = member.row(t.s, t.a);
        for &(a2, w) in &weighted {
            let missing = fallback.is_some_and(|f| !f.covered[t.s_next * shape.n_actions + a2]);
            for (j, tj) in targets.iter_mut().enumerate() {
                let next = if missing {
                    fallback.map(|f| f.value).unwrap_or_default()
                } else {
                    stats.mu(t.s_next, a2, j)
                };
                let mut v = t.r + cfg.gamma * next - penalty[base + j];
                if let Some((lo, hi)) = cfg.target_clamp {
                    v = v.clamp(lo, hi);
                }
                *tj = v;
            }
            for (i, &zi) in row.iter().enumerate() {
                let tau = taus[i];
                let g: f64 = targets.iter().map(|tj| huber.derivative(tau, tj - zi)).sum();
                grad[base + i] += w * g * inv_m;
            }
        }
    }
    let lr = cfg.learning_rate;
    let na = shape.n_actions;
    member.update_rows(|s, a, row| {
        let n = hits[s * na + a];
        if n == 0 {
            return;
        }
        let base = shape.offset(s, a);
        for (i, z) in row.iter_mut().enumerate() {
            *z += lr * grad[base + i] / n as f64;
        }
    });
}

/// Free-function form of [`Ensemble::regression_step`].
pub fn ensemble_regression_step<R: Rng + ?Sized>(
    ens: &mut Ensemble,
    batch: &[Transition],
    pi: &Policy,
    fallback: Option<&TargetFallback>,
    rng: &mut R,
) -> Result<(), EnsembleError> {
    ens.regression_step(batch, pi, fallback, rng)
}

pub fn polyak_update(ens: &mut Ensemble) {
    ens.polyak_update()
}

/// Writes `online_<l>.csv`, `target_<l>.csv` and `manifest.txt` into `dir`.
pub fn save_checkpoint(ens: &Ensemble, rng: &ChaCha8Rng, dir: &Path) -> Result<(), EnsembleError> {
    fs::create_dir_all(dir)?;
    for (l, (o, t)) in ens.online.iter().zip(&ens.targets).enumerate() {
        o.write_to(BufWriter::new(fs::File::create(dir.join(format!("online_{l}.csv")))?))?;
        t.write_to(BufWriter::new(fs::File::create(dir.join(format!("target_{l}.csv")))?))?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    let c = &ens.config;
    writeln!(w, "members={}", ens.len())?;
    writeln!(w, "steps={}", ens.steps)?;
    writeln!(w, "config={}", serde_json::to_string(c).map_err(|e| EnsembleError::Checkpoint(e.to_string()))?)?;
    writeln!(w, "rng_seed={}", hex::encode(rng.get_seed()))?;
    writeln!(w, "rng_stream={}", rng.get_stream())?;
    writeln!(w, "rng_word_pos={}", rng.get_word_pos())?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]; the generator resumes at the saved position.
pub fn load_checkpoint(dir: &Path) -> Result<(Ensemble, ChaCha8Rng), EnsembleError> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| EnsembleError::Checkpoint(format!("manifest lacks {k}")))
    };
    let bad = |k: &str| EnsembleError::Checkpoint(format!("bad {k}"));
    let members: usize = get("members")?.parse().map_err(|_| bad("members"))?;
    let steps: u64 = get("steps")?.parse().map_err(|_| bad("steps"))?;
    let config: EnsembleConfig = serde_json::from_str(&get("config")?).map_err(|_| bad("config"))?;
    let seed: [u8; 32] = hex::decode(get("rng_seed")?)
        .map_err(|_| bad("rng_seed"))?
        .try_into()
        .map_err(|_| bad("rng_seed"))?;
    let stream: u64 = get("rng_stream")?.parse().map_err(|_| bad("rng_stream"))?;
    let word_pos: u128 = get("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?;
    let read = |name: String| -> Result<QuantileTable, EnsembleError> {
        Ok(QuantileTable::read_from(BufReader::new(fs::File::open(dir.join(name))?))?)
    };
    let mut online = Vec::with_capacity(members);
    let mut targets = Vec::with_capacity(members);
    for l in 0..members {
        online.push(read(format!("online_{l}.csv"))?);
        targets.push(read(format!("target_{l}.csv"))?);
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok((
        Ensemble {
            online,
            targets,
            config,
            steps,
        },
        rng,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantile::QuantileHuber;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg() -> EnsembleConfig {
        EnsembleConfig {
            next_action: NextAction::Enumerate,
            ..EnsembleConfig::default()
        }
    }

    #[test]
    fn init_examples() {
        let shape = TableShape::new(2, 2, 3);
        let e = init_ensemble(3, shape, InitScheme::Constant(0.0), cfg(), &mut rng(0)).unwrap();
        assert!(e.online.iter().all(|t| t.atoms().iter().all(|z| *z == 0.0)));
        assert!(e.stats().sigma.iter().all(|s| *s == 0.0));
        let u = init_ensemble(3, shape, InitScheme::UniformRandom { lo: 1.5, hi: 1.5 }, cfg(), &mut rng(0)).unwrap();
        let c = init_ensemble(3, shape, InitScheme::Constant(1.5), cfg(), &mut rng(0)).unwrap();
        assert_eq!(u, c);
        let scheme = InitScheme::UniformRandom { lo: -1.0, hi: 1.0 };
        let a = init_ensemble(3, shape, scheme, cfg(), &mut rng(1)).unwrap();
        let b = init_ensemble(3, shape, scheme, cfg(), &mut rng(2)).unwrap();
        assert_ne!(a.online, b.online);
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.online, a.targets);
        assert_eq!(
            init_ensemble(1, shape, scheme, cfg(), &mut rng(0)),
            Err(EnsembleError::TooFewMembers(1))
        );
    }

    #[test]
    fn stats_examples() {
        let shape = TableShape::new(1, 2, 2);
        let t = QuantileTable::new(shape, vec![0.0, 1.0, 2.0, 5.0]).unwrap();
        let s = ensemble_stats(&[t.clone(), t.clone(), t.clone()]).unwrap();
        assert!(s.sigma.iter().all(|x| *x == 0.0));

        let a = QuantileTable::new(shape, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = QuantileTable::new(shape, vec![3.0, 3.0, 0.0, 0.0]).unwrap();
        let s = ensemble_stats(&[a.clone(), b.clone()]).unwrap();
        let vals = [1.0, 3.0];
        let mean = vals.iter().sum::<f64>() / 2.0;
        let pop_sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert_eq!((s.mu(0, 0, 0), s.sigma(0, 0, 0)), (mean, pop_sd));
        assert_eq!(ensemble_stats(&[b, a]).unwrap(), s);
        assert!(ensemble_stats(&[t]).is_err());
    }

    #[test]
    fn phi_examples() {
        let shape = TableShape::new(1, 1, 2);
        let stats = SigmaTable { shape, mu: vec![0.0; 2], sigma: vec![1.0, 0.3] };
        assert!(build_phi(&stats, 0.0).unwrap().values().iter().all(|p| *p == 0.0));
        assert_eq!(build_phi(&stats, 0.5).unwrap().values()[0], 0.5);
        let one = build_phi(&stats, 0.7).unwrap();
        let two = build_phi(&stats, 1.4).unwrap();
        for (x, y) in one.values().iter().zip(two.values()) {
            assert_eq!(2.0 * x, *y);
        }
        assert!(build_phi(&stats, -0.1).is_err());
    }

    #[test]
    fn target_examples() {
        let shape = TableShape::new(2, 1, 1);
        let zero = SigmaTable { shape, mu: vec![0.0, 0.0], sigma: vec![0.0, 0.0] };
        assert_eq!(distorted_target(&zero, 0.5, 0.9, 1.0, 0, 0, 1, 0, 0), 1.0);
        let st = SigmaTable { shape, mu: vec![0.0, 2.0], sigma: vec![0.2, 7.0] };
        let (r, g, beta) = (1.0, 0.5, 0.5);
        let oracle = r + g * st.mu(1, 0, 0) - beta * st.sigma(0, 0, 0);
        assert_eq!(distorted_target(&st, beta, g, r, 0, 0, 1, 0, 0), oracle);
        assert!((oracle - 1.9).abs() < 1e-12);
        assert_eq!(distorted_target(&st, 0.0, g, r, 0, 0, 1, 0, 0), r + g * 2.0);
    }

    fn single_tuple() -> Vec<Transition> {
        vec![Transition { s: 0, a: 0, r: 1.0, s_next: 0 }]
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let shape = TableShape::new(1, 1, 4);
        let c = EnsembleConfig { learning_rate: 0.0, ..cfg() };
        let mut e = init_ensemble(3, shape, InitScheme::UniformRandom { lo: -1.0, hi: 1.0 }, c, &mut rng(3)).unwrap();
        let before = e.clone();
        e.regression_step(&single_tuple(), &Policy::uniform(1, 1), None, &mut rng(4)).unwrap();
        assert_eq!(e.online, before.online);
        assert_eq!(e.targets, before.targets);
        assert_eq!(
            e.regression_step(&[], &Policy::uniform(1, 1), None, &mut rng(4)),
            Err(EnsembleError::EmptyBatch)
        );
    }

    #[test]
    fn update_moves_toward_the_target() {
        let shape = TableShape::new(1, 1, 1);
        let c = EnsembleConfig { kappa_huber: 100.0, beta: 0.0, ..cfg() };
        for start in [-3.0, 5.0] {
            let mut e = init_ensemble(2, shape, InitScheme::Constant(0.0), c.clone(), &mut rng(0)).unwrap();
            for t in e.online.iter_mut() {
                t.set_row(0, 0, &[start]).unwrap();
            }
            let target = 1.0 + c.gamma * e.stats().mu(0, 0, 0);
            e.regression_step(&single_tuple(), &Policy::uniform(1, 1), None, &mut rng(0)).unwrap();
            for t in &e.online {
                let moved = t.get(0, 0, 0) - start;
                assert_eq!(moved.signum(), (target - start).signum());
            }
        }
    }

    /// Golden-section search on a 1-d convex function.
    fn argmin_1d<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = hi - g * (hi - lo);
            let x2 = lo + g * (hi - lo);
            if f(x1) < f(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn regression_converges_to_the_loss_minimizer() {
        let shape = TableShape::new(1, 1, 1);
        let c = EnsembleConfig { beta: 0.0, learning_rate: 0.1, ..cfg() };
        let mut e = init_ensemble(2, shape, InitScheme::Constant(0.0), c.clone(), &mut rng(0)).unwrap();
        // targets frozen at 0 (no polyak), so sigma stays 0 and T = r
        let target = 1.0 + c.gamma * 0.0;
        let h = QuantileHuber::new(c.kappa_huber).unwrap();
        let oracle = argmin_1d(|z| h.loss(0.5, target - z), -10.0, 10.0);
        let mut steps = 0;
        while steps < 10_000 {
            e.regression_step(&single_tuple(), &Policy::uniform(1, 1), None, &mut rng(steps)).unwrap();
            steps += 1;
            if e.online.iter().all(|t| (t.get(0, 0, 0) - oracle).abs() < 1e-6) {
                break;
            }
        }
        assert!(steps < 10_000, "no convergence");
        assert!(e.stats().sigma.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn polyak_examples() {
        let shape = TableShape::new(1, 1, 1);
        let mk = |k: f64| {
            let c = EnsembleConfig { kappa_polyak: k, ..cfg() };
            let mut e = init_ensemble(2, shape, InitScheme::Constant(0.0), c, &mut rng(0)).unwrap();
            for t in e.online.iter_mut() {
                t.set_row(0, 0, &[1.0]).unwrap();
            }
            e
        };
        let mut e = mk(1.0);
        e.polyak_update();
        assert_eq!(e.targets, e.online);
        let mut e = mk(1e-9);
        e.polyak_update();
        assert!(e.targets.iter().all(|t| t.get(0, 0, 0).abs() < 1e-8));
        let mut e = mk(0.1);
        let before = e.online.clone();
        e.polyak_update();
        let oracle = (1.0 - 0.1) * 0.0 + 0.1 * 1.0;
        assert!(e.targets.iter().all(|t| (t.get(0, 0, 0) - oracle).abs() < 1e-15));
        assert_eq!(e.online, before);
        let bad = EnsembleConfig { kappa_polyak: 0.0, ..cfg() };
        assert!(init_ensemble(2, shape, InitScheme::Constant(0.0), bad, &mut rng(0)).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // total loss of one member as a function of a single atom
        let mut r = rng(9);
        let h = QuantileHuber::new(1.0).unwrap();
        let m = 5;
        let taus = tau_hats(m);
        let mut checked = 0;
        while checked < 100 {
            let targets: Vec<f64> = (0..m).map(|_| r.random_range(-3.0..3.0)).collect();
            let i = r.random_range(0..m);
            let z: f64 = r.random_range(-3.0..3.0);
            if targets.iter().any(|t| ((t - z).abs() - 1.0).abs() < 1e-3 || (t - z).abs() < 1e-3) {
                continue;
            }
            let loss = |zz: f64| targets.iter().map(|t| h.loss(taus[i], t - zz)).sum::<f64>() / m as f64;
            let step = 1e-6;
            let fd = (loss(z + step) - loss(z - step)) / (2.0 * step);
            let closed = -targets.iter().map(|t| h.derivative(taus[i], t - z)).sum::<f64>() / m as f64;
            assert!((fd - closed).abs() < 1e-4, "{fd} vs {closed}");
            checked += 1;
        }
    }

    #[test]
    fn uniform_shape_uses_the_row_mean_penalty() {
        let shape = TableShape::new(1, 1, 2);
        let stats = SigmaTable { shape, mu: vec![0.0; 2], sigma: vec![0.2, 0.6] };
        let mut e = init_ensemble(2, shape, InitScheme::Constant(0.0), EnsembleConfig { beta: 2.0, shape: PessimismShape::Uniform, ..cfg() }, &mut rng(0)).unwrap();
        assert_eq!(e.penalty(&stats), vec![0.8, 0.8]);
        e.config.shape = PessimismShape::Distorted;
        assert_eq!(e.penalty(&stats), vec![0.4, 1.2]);
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let shape = TableShape::new(2, 2, 3);
        let c = EnsembleConfig { next_action: NextAction::Sample, ..EnsembleConfig::default() };
        let mut g = rng(21);
        let mut e = init_ensemble(3, shape, InitScheme::UniformRandom { lo: -1.0, hi: 1.0 }, c, &mut g).unwrap();
        let pi = Policy::uniform(2, 2);
        let batch = vec![
            Transition { s: 0, a: 1, r: 0.5, s_next: 1 },
            Transition { s: 1, a: 0, r: -0.2, s_next: 0 },
        ];
        for _ in 0..5 {
            e.regression_step(&batch, &pi, None, &mut g).unwrap();
            e.polyak_update();
        }
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&e, &g, dir.path()).unwrap();
        let (mut e2, mut g2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(e2, e);
        for _ in 0..5 {
            e.regression_step(&batch, &pi, None, &mut g).unwrap();
            e2.regression_step(&batch, &pi, None, &mut g2).unwrap();
        }
        assert_eq!(e2, e);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sigma_nonnegative_and_permutation_symmetric(seed in any::<u64>(), l in 2usize..6) {
            let shape = TableShape::new(2, 2, 4);
            let e = init_ensemble(l, shape, InitScheme::UniformRandom { lo: -2.0, hi: 2.0 }, cfg(), &mut rng(seed)).unwrap();
            let s = ensemble_stats(&e.online).unwrap();
            prop_assert!(s.sigma.iter().all(|x| *x >= 0.0));
            let mut rev = e.online.clone();
            rev.reverse();
            let t = ensemble_stats(&rev).unwrap();
            for (x, y) in s.sigma.iter().zip(&t.sigma) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
