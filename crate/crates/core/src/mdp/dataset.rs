//! Offline datasets of `(s, a, r, s')` tuples and their flat-text format.
//!
//! File layout:
//!
//! ```text
//! # seed=<u64>
//! # mdp_hash=<hex>
//! s,a,r,s_next
//! ...
//! ```
//!
//! Rewards are written with 17 significant digits so a reload is bit-exact.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_index, sample_index, FiniteMdp, MdpError, Policy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// How `(s, a)` pairs are chosen when generating a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplingScheme {
    /// Independent draws of `(s, a)` from weights over `S x A` (row-major).
    IidFromWeights(Vec<f64>),
    /// Episodes from `rho0` following the behavior policy, restarted every `horizon` steps.
    Trajectories { horizon: usize },
}

/// Header carried by the dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub seed: u64,
    pub mdp_hash: String,
}

/// `D`, with the derived counts `N(s,a)` and the per-pair index `D(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    n_states: usize,
    n_actions: usize,
    tuples: Vec<Transition>,
    counts: Vec<usize>,
    index: Vec<Vec<(f64, usize)>>,
}

impl OfflineDataset {
    pub fn from_tuples(
        n_states: usize,
        n_actions: usize,
        tuples: Vec<Transition>,
    ) -> Result<Self, MdpError> {
        let mut counts = vec![0usize; n_states * n_actions];
        let mut index = vec![Vec::new(); n_states * n_actions];
        for t in &tuples {
            check_index("state", t.s, n_states)?;
            check_index("action", t.a, n_actions)?;
            check_index("next state", t.s_next, n_states)?;
            if !t.r.is_finite() {
                return Err(MdpError::InvalidReward {
                    state: t.s,
                    action: t.a,
                    reason: format!("non-finite reward {} in dataset", t.r),
                });
            }
            let k = t.s * n_actions + t.a;
            counts[k] += 1;
            index[k].push((t.r, t.s_next));
        }
        Ok(Self {
            n_states,
            n_actions,
            tuples,
            counts,
            index,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[Transition] {
        &self.tuples
    }

    /// `N(s,a)`.
    pub fn count(&self, s: usize, a: usize) -> usize {
        self.counts[s * self.n_actions + a]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `D(s,a)` as `(r, s')` pairs in insertion order.
    pub fn pairs(&self, s: usize, a: usize) -> &[(f64, usize)] {
        &self.index[s * self.n_actions + a]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.tuples.iter().map(|t| t.r.abs()).fold(0.0, f64::max)
    }

    pub fn write_to<W: Write>(&self, mut w: W, header: &DatasetHeader) -> Result<(), MdpError> {
        writeln!(w, "# seed={}", header.seed)?;
        writeln!(w, "# mdp_hash={}", header.mdp_hash)?;
        for t in &self.tuples {
            writeln!(w, "{},{},{:.16e},{}", t.s, t.a, t.r, t.s_next)?;
        }
        Ok(())
    }

    /// Reads the flat format back. The shape is not stored in the file, so it
    /// is supplied by the caller (normally from the MDP the hash refers to).
    pub fn read_from<R: BufRead>(
        reader: R,
        n_states: usize,
        n_actions: usize,
    ) -> Result<(Self, DatasetHeader), MdpError> {
        let mut seed = None;
        let mut mdp_hash = None;
        let mut tuples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed=") {
                    seed = Some(v.trim().parse::<u64>().map_err(|e| MdpError::Parse {
                        line: lineno,
                        message: format!("bad seed: {e}"),
                    })?);
                } else if let Some(v) = rest.strip_prefix("mdp_hash=") {
                    mdp_hash = Some(v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(MdpError::Parse {
                    line: lineno,
                    message: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse_idx = |f: &str| {
                f.parse::<usize>().map_err(|e| MdpError::Parse {
                    line: lineno,
                    message: format!("bad index {f:?}: {e}"),
                })
            };
            let r = fields[2].parse::<f64>().map_err(|e| MdpError::Parse {
                line: lineno,
                message: format!("bad reward {:?}: {e}", fields[2]),
            })?;
            tuples.push(Transition {
                s: parse_idx(fields[0])?,
                a: parse_idx(fields[1])?,
                r,
                s_next: parse_idx(fields[3])?,
            });
        }
        let header = DatasetHeader {
            seed: seed.ok_or(MdpError::Parse {
                line: 1,
                message: "missing '# seed=' header".into(),
            })?,
            mdp_hash: mdp_hash.ok_or(MdpError::Parse {
                line: 2,
                message: "missing '# mdp_hash=' header".into(),
            })?,
        };
        Ok((Self::from_tuples(n_states, n_actions, tuples)?, header))
    }
}

/// Draws `n` tuples from `mdp` under `scheme`.
///
/// In i.i.d. mode the behavior policy is unused; pairs come from the weights.
pub fn generate_offline_dataset<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    behavior: &Policy,
    n: usize,
    scheme: &SamplingScheme,
    rng: &mut R,
) -> Result<OfflineDataset, MdpError> {
    if n == 0 {
        return Err(MdpError::EmptyRequest);
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut tuples = Vec::with_capacity(n);
    match scheme {
        SamplingScheme::IidFromWeights(w) => {
            if w.len() != ns * na {
                return Err(MdpError::ShapeMismatch {
                    what: "sampling weights",
                    expected: ns * na,
                    got: w.len(),
                });
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(MdpError::InvalidWeights(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(MdpError::ZeroSupportWeights);
            }
            let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
            for _ in 0..n {
                let k = sample_index(&probs, rng);
                let (s, a) = (k / na, k % na);
                let (r, s_next) = mdp.sample_step_unchecked(s, a, rng);
                tuples.push(Transition { s, a, r, s_next });
            }
        }
        SamplingScheme::Trajectories { horizon } => {
            if behavior.n_states() != ns || behavior.n_actions() != na {
                return Err(MdpError::ShapeMismatch {
                    what: "behavior policy",
                    expected: ns * na,
                    got: behavior.n_states() * behavior.n_actions(),
                });
            }
            let horizon = (*horizon).max(1);
            'outer: loop {
                let mut s = sample_index(&mdp.rho0, rng);
                for _ in 0..horizon {
                    let a = behavior.sample(s, rng);
                    let (r, s_next) = mdp.sample_step_unchecked(s, a, rng);
                    tuples.push(Transition { s, a, r, s_next });
                    if tuples.len() == n {
                        break 'outer;
                    }
                    s = s_next;
                }
            }
        }
    }
    OfflineDataset::from_tuples(ns, na, tuples)
}
