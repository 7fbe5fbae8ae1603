//! Quantile distortion, distorted distributional evaluation and the uniform
//! pessimism baseline.
//!
//! The distortion `Q_phi` subtracts `phi(s, a, tau_m)` from the `m`-th atom
//! and re-sorts the row. Because `phi` lives on the same grid as the atoms,
//! distorting the projected target equals projecting the distorted target,
//! so a step computes target quantiles first and distorts them afterwards.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bellman::{empirical_bellman_quantiles, exact_quantiles_unchecked, BellmanError};
use crate::mdp::{FiniteMdp, OfflineDataset, Policy};
use crate::quantile::{sup_wasserstein, QuantileError, QuantileTable, TableShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistortionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative distortion {value} at (s={s}, a={a}, m={m}) in a pessimistic table")]
    Negative { s: usize, a: usize, m: usize, value: f64 },

    #[error("non-finite distortion at flat index {0}")]
    NonFinite(usize),

    #[error("zero denominator: the two inputs are identical")]
    ZeroDenominator,

    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),

    #[error(transparent)]
    Bellman(#[from] BellmanError),

    #[error(transparent)]
    Quantile(#[from] QuantileError),
}

/// `phi(s, a, tau_m)` on the atom grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionTable {
    shape: TableShape,
    phi: Vec<f64>,
    pessimistic: bool,
}

impl DistortionTable {
    /// With `pessimistic`, every entry must be nonnegative.
    pub fn new(shape: TableShape, phi: Vec<f64>, pessimistic: bool) -> Result<Self, DistortionError> {
        if phi.len() != shape.len() {
            return Err(DistortionError::ShapeMismatch(format!(
                "{} entries for {shape:?}",
                phi.len()
            )));
        }
        let t = Self {
            shape,
            phi,
            pessimistic,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DistortionError> {
        for (i, v) in self.phi.iter().enumerate() {
            if !v.is_finite() {
                return Err(DistortionError::NonFinite(i));
            }
            if self.pessimistic && *v < 0.0 {
                let m = i % self.shape.n_atoms;
                let k = i / self.shape.n_atoms;
                return Err(DistortionError::Negative {
                    s: k / self.shape.n_actions,
                    a: k % self.shape.n_actions,
                    m,
                    value: *v,
                });
            }
        }
        Ok(())
    }

    pub fn zeros(shape: TableShape) -> Self {
        Self {
            shape,
            phi: vec![0.0; shape.len()],
            pessimistic: true,
        }
    }

    pub fn constant(shape: TableShape, c: f64) -> Result<Self, DistortionError> {
        Self::new(shape, vec![c; shape.len()], true)
    }

    /// Repeats one value per pair across all atoms.
    pub fn broadcast(shape: TableShape, per_pair: &[f64]) -> Result<Self, DistortionError> {
        if per_pair.len() != shape.n_pairs() {
            return Err(DistortionError::ShapeMismatch(format!(
                "{} per-pair values for {} pairs",
                per_pair.len(),
                shape.n_pairs()
            )));
        }
        let phi = per_pair
            .iter()
            .flat_map(|c| std::iter::repeat_n(*c, shape.n_atoms))
            .collect();
        Self::new(shape, phi, true)
    }

    pub fn shape(&self) -> TableShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    pub fn is_pessimistic(&self) -> bool {
        self.pessimistic
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.shape.offset(s, a);
        &self.phi[o..o + self.shape.n_atoms]
    }

    /// Per-pair average over atoms.
    pub fn row_means(&self) -> Vec<f64> {
        self.phi
            .chunks(self.shape.n_atoms)
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// `bar phi`.
    pub fn sup(&self) -> f64 {
        self.phi.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `underline phi`.
    pub fn inf(&self) -> f64 {
        self.phi.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn same_shape(a: TableShape, b: TableShape) -> Result<(), DistortionError> {
    if a != b {
        return Err(DistortionError::ShapeMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `Q_phi eta`: atom-wise subtraction followed by a per-row re-sort.
pub fn distort(eta: &QuantileTable, phi: &DistortionTable) -> Result<QuantileTable, DistortionError> {
    same_shape(eta.shape(), phi.shape())?;
    phi.validate()?;
    let mut out = eta.clone();
    out.update_rows(|s, a, row| {
        for (z, p) in row.iter_mut().zip(phi.row(s, a)) {
            *z -= p;
        }
    });
    Ok(out)
}

/// What to do with pairs that have no data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MissingData {
    Error,
    /// Fill every atom with this value and skip the distortion.
    WorstCase(f64),
}

impl MissingData {
    /// Clamp to `-r_max / (1 - gamma)`.
    pub fn worst_case(r_max: f64, gamma: f64) -> Self {
        MissingData::WorstCase(-r_max / (1.0 - gamma))
    }
}

/// Where Bellman targets come from.
#[derive(Debug, Clone, Copy)]
pub enum BellmanSource<'a> {
    Model(&'a FiniteMdp),
    Dataset {
        data: &'a OfflineDataset,
        gamma: f64,
        missing: MissingData,
    },
}

impl BellmanSource<'_> {
    pub fn gamma(&self) -> f64 {
        match self {
            BellmanSource::Model(m) => m.gamma,
            BellmanSource::Dataset { gamma, .. } => *gamma,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            BellmanSource::Model(m) => (m.n_states, m.n_actions),
            BellmanSource::Dataset { data, .. } => (data.n_states(), data.n_actions()),
        }
    }
}

/// Projected targets for every pair plus a flag telling whether each row
/// came from data (`true`) or from the missing-data fallback.
fn projected_rows(
    source: &BellmanSource<'_>,
    pi: &Policy,
    eta: &QuantileTable,
) -> Result<(QuantileTable, Vec<bool>), DistortionError> {
    let shape = eta.shape();
    let (ns, na) = source.dims();
    if shape.n_states != ns || shape.n_actions != na || pi.n_states() != ns || pi.n_actions() != na {
        return Err(DistortionError::ShapeMismatch(format!(
            "source {ns}x{na}, table {shape:?}, policy {}x{}",
            pi.n_states(),
            pi.n_actions()
        )));
    }
    let rows: Vec<Result<(Vec<f64>, bool), DistortionError>> = (0..shape.n_pairs())
        .into_par_iter()
        .map(|k| {
            let (s, a) = (k / na, k % na);
            match source {
                BellmanSource::Model(mdp) => Ok((exact_quantiles_unchecked(mdp, pi, eta, s, a), true)),
                BellmanSource::Dataset { data, gamma, missing } => {
                    match empirical_bellman_quantiles(data, *gamma, pi, eta, s, a) {
                        Ok(q) => Ok((q, true)),
                        Err(BellmanError::NoData { .. }) => match missing {
                            MissingData::WorstCase(v) => Ok((vec![*v; shape.n_atoms], false)),
                            MissingData::Error => Err(BellmanError::NoData { s, a }.into()),
                        },
                        Err(e) => Err(e.into()),
                    }
                }
            }
        })
        .collect();
    let mut atoms = Vec::with_capacity(shape.len());
    let mut covered = Vec::with_capacity(shape.n_pairs());
    for r in rows {
        let (row, c) = r?;
        atoms.extend(row);
        covered.push(c);
    }
    Ok((QuantileTable::new(shape, atoms)?, covered))
}

/// `Pi_w1 T^pi eta` (or its empirical version).
pub fn projected_bellman_step(
    source: &BellmanSource<'_>,
    pi: &Policy,
    eta: &QuantileTable,
) -> Result<QuantileTable, DistortionError> {
    Ok(projected_rows(source, pi, eta)?.0)
}

/// `Q_phi Pi_w1 T^pi eta`. Rows filled by the worst-case fallback are left
/// undistorted.
pub fn dde_step(
    source: &BellmanSource<'_>,
    pi: &Policy,
    eta: &QuantileTable,
    phi: &DistortionTable,
) -> Result<QuantileTable, DistortionError> {
    same_shape(eta.shape(), phi.shape())?;
    phi.validate()?;
    let (mut next, covered) = projected_rows(source, pi, eta)?;
    let na = eta.shape().n_actions;
    next.update_rows(|s, a, row| {
        if covered[s * na + a] {
            for (z, p) in row.iter_mut().zip(phi.row(s, a)) {
                *z -= p;
            }
        }
    });
    Ok(next)
}

/// Shifts every target quantile of `(s, a)` down by `c(s, a)`.
pub fn uniform_pessimism_step(
    source: &BellmanSource<'_>,
    pi: &Policy,
    eta: &QuantileTable,
    c: &[f64],
) -> Result<QuantileTable, DistortionError> {
    let phi = DistortionTable::broadcast(eta.shape(), c)?;
    dde_step(source, pi, eta, &phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub iterations: usize,
    /// `bar w_inf` between the last two iterates.
    pub final_delta: f64,
    pub per_step_ratios: Vec<f64>,
    pub converged: bool,
}

/// Default budget `10 * log(tol) / log(gamma)`.
pub fn default_max_iter(tol: f64, gamma: f64) -> usize {
    (10.0 * tol.ln() / gamma.ln()).ceil().max(1.0) as usize
}

pub const DEFAULT_TOL: f64 = 1e-9;

/// Iterates `step` from `eta0` until successive iterates are within `tol` in
/// `bar w_inf`, or `max_iter` steps have been taken.
pub fn iterate_fixed_point<F, E>(
    mut step: F,
    eta0: &QuantileTable,
    tol: f64,
    max_iter: usize,
) -> Result<(QuantileTable, FixedPointReport), E>
where
    F: FnMut(&QuantileTable) -> Result<QuantileTable, E>,
    E: From<DistortionError>,
{
    if !(tol > 0.0) {
        return Err(DistortionError::InvalidTolerance(tol).into());
    }
    let mut eta = eta0.clone();
    let mut ratios = Vec::new();
    let mut prev_delta: Option<f64> = None;
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = step(&eta)?;
        iterations += 1;
        delta = sup_wasserstein(&next, &eta, f64::INFINITY).map_err(DistortionError::from)?;
        if let Some(pd) = prev_delta {
            if pd > 0.0 {
                ratios.push(delta / pd);
            }
        }
        prev_delta = Some(delta);
        eta = next;
        if delta <= tol {
            break;
        }
    }
    let report = FixedPointReport {
        iterations,
        final_delta: delta,
        per_step_ratios: ratios,
        converged: delta <= tol,
    };
    Ok((eta, report))
}

/// `bar w_p(step(mu), step(nu)) / bar w_p(mu, nu)`.
pub fn contraction_ratio<F, E>(mut step: F, mu: &QuantileTable, nu: &QuantileTable, p: f64) -> Result<f64, E>
where
    F: FnMut(&QuantileTable) -> Result<QuantileTable, E>,
    E: From<DistortionError>,
{
    let den = sup_wasserstein(mu, nu, p).map_err(DistortionError::from)?;
    if den == 0.0 {
        return Err(DistortionError::ZeroDenominator.into());
    }
    let (a, b) = (step(mu)?, step(nu)?);
    let num = sup_wasserstein(&a, &b, p).map_err(DistortionError::from)?;
    Ok(num / den)
}

/// Bounds on the distorted fixed point given the undistorted one:
/// `F - phi - gamma sup(phi) / (1 - gamma)` below and
/// `F - phi - gamma inf(phi) / (1 - gamma)` above, each row re-sorted.
pub fn sandwich_bounds(
    f_inf: &QuantileTable,
    phi: &DistortionTable,
    gamma: f64,
) -> Result<(QuantileTable, QuantileTable), DistortionError> {
    same_shape(f_inf.shape(), phi.shape())?;
    let k = gamma / (1.0 - gamma);
    let (hi_phi, lo_phi) = (phi.sup(), phi.inf());
    let build = |extra: f64| {
        let mut t = f_inf.clone();
        t.update_rows(|s, a, row| {
            for (z, p) in row.iter_mut().zip(phi.row(s, a)) {
                *z = *z - p - extra;
            }
        });
        t
    };
    Ok((build(k * hi_phi), build(k * lo_phi)))
}
