//! Atom-based return distributions.
//!
//! A [`QuantileTable`] holds `M` atoms per state-action pair, each atom a
//! uniform-weight point mass; the `m`-th atom (0-based) represents the
//! quantile level `(m + 0.5) / M`. Rows are kept sorted. [`AtomMixture`]
//! covers the non-uniform finite mixtures produced by Bellman targets.
//!
//! Wasserstein distances are exact: both quantile functions are step
//! functions, so the integral is a finite sum over merged breakpoints.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::RewardDist;

/// Slack used when comparing cumulative weights against a quantile level.
pub const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantileError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite atom value {value} at (s={s}, a={a}, m={m})")]
    NonFinite { s: usize, a: usize, m: usize, value: f64 },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("quantile level {0} outside [0, 1]")]
    TauOutOfRange(f64),

    #[error("wasserstein order must be >= 1, got {0}")]
    InvalidOrder(f64),

    #[error("huber threshold must be positive, got {0}")]
    InvalidKappa(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QuantileError {
    fn from(e: std::io::Error) -> Self {
        QuantileError::Io(e.to_string())
    }
}

/// Midpoint level `(m + 0.5) / M` of the 0-based atom `m`.
#[inline]
pub fn tau_hat(m: usize, n_atoms: usize) -> f64 {
    (m as f64 + 0.5) / n_atoms as f64
}

/// All midpoint levels for `M` atoms.
pub fn tau_hats(n_atoms: usize) -> Vec<f64> {
    (0..n_atoms).map(|m| tau_hat(m, n_atoms)).collect()
}

/// `(n_states, n_actions, n_atoms)` of a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TableShape {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_atoms: usize,
}

impl TableShape {
    pub fn new(n_states: usize, n_actions: usize, n_atoms: usize) -> Self {
        Self {
            n_states,
            n_actions,
            n_atoms,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn len(&self) -> usize {
        self.n_pairs() * self.n_atoms
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_atoms
    }
}

/// `Z(s, a, m)` for all pairs; the tabular return distribution `eta_theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    shape: TableShape,
    atoms: Vec<f64>,
}

fn sort_row(row: &mut [f64]) {
    row.sort_unstable_by(f64::total_cmp);
}

impl QuantileTable {
    /// Builds a table from flat `[s][a][m]` atoms, sorting every row.
    pub fn new(shape: TableShape, mut atoms: Vec<f64>) -> Result<Self, QuantileError> {
        if atoms.len() != shape.len() || shape.n_atoms == 0 {
            return Err(QuantileError::ShapeMismatch(format!(
                "expected {} atoms for {:?}, got {}",
                shape.len(),
                shape,
                atoms.len()
            )));
        }
        if let Some(i) = atoms.iter().position(|v| !v.is_finite()) {
            let m = i % shape.n_atoms;
            let pair = i / shape.n_atoms;
            return Err(QuantileError::NonFinite {
                s: pair / shape.n_actions,
                a: pair % shape.n_actions,
                m,
                value: atoms[i],
            });
        }
        for row in atoms.chunks_mut(shape.n_atoms) {
            sort_row(row);
        }
        Ok(Self { shape, atoms })
    }

    pub fn constant(shape: TableShape, value: f64) -> Self {
        Self {
            shape,
            atoms: vec![value; shape.len()],
        }
    }

    pub fn zeros(shape: TableShape) -> Self {
        Self::constant(shape, 0.0)
    }

    pub fn shape(&self) -> TableShape {
        self.shape
    }

    pub fn n_atoms(&self) -> usize {
        self.shape.n_atoms
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let o = self.shape.offset(s, a);
        &self.atoms[o..o + self.shape.n_atoms]
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize, m: usize) -> f64 {
        self.atoms[self.shape.offset(s, a) + m]
    }

    /// Replaces one row; the stored row is the sorted copy of `values`.
    pub fn set_row(&mut self, s: usize, a: usize, values: &[f64]) -> Result<(), QuantileError> {
        if values.len() != self.shape.n_atoms {
            return Err(QuantileError::ShapeMismatch(format!(
                "row of length {} for M={}",
                values.len(),
                self.shape.n_atoms
            )));
        }
        let o = self.shape.offset(s, a);
        let row = &mut self.atoms[o..o + self.shape.n_atoms];
        row.copy_from_slice(values);
        sort_row(row);
        Ok(())
    }

    /// Applies `f` to every row in place and restores sorted order afterwards.
    pub fn update_rows<F>(&mut self, mut f: F)
    where
        F: FnMut(usize, usize, &mut [f64]),
    {
        let na = self.shape.n_actions;
        for (k, row) in self.atoms.chunks_mut(self.shape.n_atoms).enumerate() {
            f(k / na, k % na, row);
            sort_row(row);
        }
    }

    /// Builds a table row by row from `f(s, a)`.
    pub fn from_rows<F>(shape: TableShape, mut f: F) -> Result<Self, QuantileError>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut atoms = Vec::with_capacity(shape.len());
        for s in 0..shape.n_states {
            for a in 0..shape.n_actions {
                atoms.extend(f(s, a));
            }
        }
        Self::new(shape, atoms)
    }

    pub fn min_atom(&self) -> f64 {
        self.atoms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_atom(&self) -> f64 {
        self.atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn row_mean(&self, s: usize, a: usize) -> f64 {
        self.row(s, a).iter().sum::<f64>() / self.shape.n_atoms as f64
    }

    /// CSV `s,a,m,value` preceded by `# M=<int>`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), QuantileError> {
        writeln!(w, "# M={}", self.shape.n_atoms)?;
        for s in 0..self.shape.n_states {
            for a in 0..self.shape.n_actions {
                for (m, v) in self.row(s, a).iter().enumerate() {
                    writeln!(w, "{s},{a},{m},{v:.16e}")?;
                }
            }
        }
        Ok(())
    }

    /// Reads the CSV form; the state/action counts are inferred from the
    /// largest indices and every cell must be present exactly once.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, QuantileError> {
        let mut n_atoms = None;
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("M=") {
                    n_atoms = Some(v.trim().parse::<usize>().map_err(|e| {
                        QuantileError::Parse {
                            line: lineno,
                            message: format!("bad M: {e}"),
                        }
                    })?);
                }
                continue;
            }
            let f: Vec<&str> = t.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(QuantileError::Parse {
                    line: lineno,
                    message: format!("expected 4 fields, got {}", f.len()),
                });
            }
            let idx = |x: &str| {
                x.parse::<usize>().map_err(|e| QuantileError::Parse {
                    line: lineno,
                    message: format!("bad index {x:?}: {e}"),
                })
            };
            let v = f[3].parse::<f64>().map_err(|e| QuantileError::Parse {
                line: lineno,
                message: format!("bad value {:?}: {e}", f[3]),
            })?;
            cells.push((idx(f[0])?, idx(f[1])?, idx(f[2])?, v));
        }
        let n_atoms = n_atoms.ok_or(QuantileError::Parse {
            line: 1,
            message: "missing '# M=' header".into(),
        })?;
        let ns = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let na = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let shape = TableShape::new(ns, na, n_atoms);
        if cells.len() != shape.len() {
            return Err(QuantileError::ShapeMismatch(format!(
                "{} cells for inferred shape {:?}",
                cells.len(),
                shape
            )));
        }
        let mut atoms = vec![f64::NAN; shape.len()];
        for (s, a, m, v) in cells {
            if m >= n_atoms {
                return Err(QuantileError::ShapeMismatch(format!("atom index {m} >= M")));
            }
            atoms[shape.offset(s, a) + m] = v;
        }
        Self::new(shape, atoms)
    }
}

/// Finite mixture of point masses with arbitrary weights, stored sorted by value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomMixture {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomMixture {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, QuantileError> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(QuantileError::InvalidMixture(format!(
                "{} values vs {} weights",
                values.len(),
                weights.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QuantileError::InvalidMixture("non-finite value".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(QuantileError::InvalidMixture("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(QuantileError::InvalidMixture(format!(
                "weights sum to {total}"
            )));
        }
        Ok(Self::sorted(values, weights))
    }

    /// Renormalizes nonnegative weights to sum to one.
    pub fn from_unnormalized(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, QuantileError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(QuantileError::InvalidMixture(format!(
                "total weight {total}"
            )));
        }
        let w = weights.into_iter().map(|w| w / total).collect::<Vec<_>>();
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(QuantileError::InvalidMixture(format!(
                "weights sum to {total}"
            )));
        }
        if values.len() != w.len() || values.iter().any(|v| !v.is_finite()) || w.iter().any(|x| *x < 0.0) {
            return Err(QuantileError::InvalidMixture("bad values or weights".into()));
        }
        Ok(Self::sorted(values, w))
    }

    /// Equal-weight mixture of `values`.
    pub fn uniform(values: &[f64]) -> Self {
        let w = 1.0 / values.len() as f64;
        Self::sorted(values.to_vec(), vec![w; values.len()])
    }

    pub fn point(value: f64) -> Self {
        Self {
            values: vec![value],
            weights: vec![1.0],
        }
    }

    fn sorted(values: Vec<f64>, weights: Vec<f64>) -> Self {
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (values, weights) = pairs.into_iter().unzip();
        Self { values, weights }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// `P(X <= z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        let k = self.values.partition_point(|v| *v <= z);
        self.weights[..k].iter().sum::<f64>().min(1.0)
    }

    /// Quantiles at a nondecreasing list of levels in one pass.
    pub fn quantiles(&self, taus: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(taus.len());
        let mut acc = 0.0;
        let mut i = 0;
        let last = self.last_positive();
        let mut first = true;
        for &tau in taus {
            loop {
                if i > last {
                    out.push(self.values[last]);
                    break;
                }
                if self.weights[i] <= 0.0 {
                    i += 1;
                    continue;
                }
                if first {
                    acc += self.weights[i];
                    first = false;
                }
                if acc >= tau - TIE_EPS {
                    out.push(self.values[i]);
                    break;
                }
                i += 1;
                first = true;
            }
        }
        out
    }

    fn last_positive(&self) -> usize {
        self.weights
            .iter()
            .rposition(|w| *w > 0.0)
            .unwrap_or(self.values.len() - 1)
    }
}

/// Anything with a computable quantile function on `[0, 1]`.
pub trait QuantileFunction {
    fn quantile(&self, tau: f64) -> f64;
}

impl QuantileFunction for AtomMixture {
    fn quantile(&self, tau: f64) -> f64 {
        self.quantiles(&[tau.clamp(0.0, 1.0)])[0]
    }
}

impl QuantileFunction for RewardDist {
    fn quantile(&self, tau: f64) -> f64 {
        RewardDist::quantile(self, tau)
    }
}

impl<F: Fn(f64) -> f64> QuantileFunction for F {
    fn quantile(&self, tau: f64) -> f64 {
        self(tau)
    }
}

/// Right-continuous CDF of an equal-weight atom row: `#{m : atom_m <= z} / M`.
pub fn cdf_row(row: &[f64], z: f64) -> f64 {
    let sorted = row.windows(2).all(|w| w[0] <= w[1]);
    let count = if sorted {
        row.partition_point(|v| *v <= z)
    } else {
        row.iter().filter(|v| **v <= z).count()
    };
    count as f64 / row.len() as f64
}

/// `inf { x : tau <= F(x) }` for an equal-weight atom row.
pub fn inverse_cdf_row(row: &[f64], tau: f64) -> Result<f64, QuantileError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QuantileError::TauOutOfRange(tau));
    }
    let mut sorted = row.to_vec();
    sort_row(&mut sorted);
    let m = sorted.len() as f64;
    // smallest k >= 1 with k / M >= tau
    let k = ((tau * m) - TIE_EPS * m).ceil().max(1.0) as usize;
    Ok(sorted[k.min(sorted.len()) - 1])
}

/// Quantile function of a mixture with the same contract as [`inverse_cdf_row`].
pub fn inverse_cdf(d: &AtomMixture, tau: f64) -> Result<f64, QuantileError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QuantileError::TauOutOfRange(tau));
    }
    Ok(d.quantile(tau))
}

/// Wasserstein order: finite `p >= 1` or `f64::INFINITY`.
fn check_order(p: f64) -> Result<(), QuantileError> {
    if p.is_nan() || p < 1.0 {
        return Err(QuantileError::InvalidOrder(p));
    }
    Ok(())
}

/// Exact `w_p` between two finite mixtures via merged quantile breakpoints.
pub fn wasserstein(a: &AtomMixture, b: &AtomMixture, p: f64) -> Result<f64, QuantileError> {
    check_order(p)?;
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ca, mut cb) = (a.weights[0], b.weights[0]);
    let mut prev = 0.0;
    let mut acc = 0.0f64;
    loop {
        let next = ca.min(cb).min(1.0);
        let width = next - prev;
        if width > TIE_EPS {
            let d = (a.values[i] - b.values[j]).abs();
            if p.is_infinite() {
                acc = acc.max(d);
            } else {
                acc += width * d.powf(p);
            }
        }
        prev = prev.max(next);
        let a_done = ca <= next + TIE_EPS;
        let b_done = cb <= next + TIE_EPS;
        if a_done {
            i += 1;
        }
        if b_done {
            j += 1;
        }
        if i >= a.len() || j >= b.len() {
            break;
        }
        if a_done {
            ca += a.weights[i];
        }
        if b_done {
            cb += b.weights[j];
        }
    }
    Ok(if p.is_infinite() { acc } else { acc.powf(1.0 / p) })
}

fn sorted_cow(x: &[f64]) -> std::borrow::Cow<'_, [f64]> {
    if x.windows(2).all(|w| w[0] <= w[1]) {
        std::borrow::Cow::Borrowed(x)
    } else {
        let mut v = x.to_vec();
        sort_row(&mut v);
        std::borrow::Cow::Owned(v)
    }
}

/// `w_p` between two equal-weight rows of the same length.
pub fn wasserstein_rows(a: &[f64], b: &[f64], p: f64) -> Result<f64, QuantileError> {
    check_order(p)?;
    if a.len() != b.len() {
        return wasserstein(&AtomMixture::uniform(a), &AtomMixture::uniform(b), p);
    }
    let (a, b) = (sorted_cow(a), sorted_cow(b));
    let diffs = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs());
    if p.is_infinite() {
        Ok(diffs.fold(0.0, f64::max))
    } else {
        let n = a.len() as f64;
        Ok((diffs.map(|d| d.powf(p)).sum::<f64>() / n).powf(1.0 / p))
    }
}

/// `bar w_p`: the largest per-pair `w_p` between two tables.
pub fn sup_wasserstein(
    eta_a: &QuantileTable,
    eta_b: &QuantileTable,
    p: f64,
) -> Result<f64, QuantileError> {
    check_order(p)?;
    let (sa, sb) = (eta_a.shape(), eta_b.shape());
    if sa.n_states != sb.n_states || sa.n_actions != sb.n_actions {
        return Err(QuantileError::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
    }
    let mut best = 0.0f64;
    for s in 0..sa.n_states {
        for a in 0..sa.n_actions {
            best = best.max(wasserstein_rows(eta_a.row(s, a), eta_b.row(s, a), p)?);
        }
    }
    Ok(best)
}

/// W1-optimal `M`-atom approximation: the target's quantiles at the midpoints.
pub fn project_w1<Q: QuantileFunction + ?Sized>(target: &Q, n_atoms: usize) -> Vec<f64> {
    (0..n_atoms)
        .map(|m| target.quantile(tau_hat(m, n_atoms)))
        .collect()
}

/// Midpoint projection of a finite mixture in a single pass.
pub fn project_mixture(target: &AtomMixture, n_atoms: usize) -> Vec<f64> {
    target.quantiles(&tau_hats(n_atoms))
}

/// Quantile Huber loss `|tau - 1{u<0}| * L_kappa(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileHuber {
    kappa: f64,
}

impl QuantileHuber {
    pub fn new(kappa: f64) -> Result<Self, QuantileError> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(QuantileError::InvalidKappa(kappa));
        }
        Ok(Self { kappa })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    #[inline]
    pub fn loss(&self, tau: f64, u: f64) -> f64 {
        let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
        let h = if u.abs() < self.kappa {
            0.5 * u * u
        } else {
            self.kappa * (u.abs() - 0.5 * self.kappa)
        };
        w * h
    }

    /// `d/du` of [`loss`](Self::loss); the subgradient 0 is used at `u = 0`.
    #[inline]
    pub fn derivative(&self, tau: f64, u: f64) -> f64 {
        let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
        w * u.clamp(-self.kappa, self.kappa)
    }
}

pub fn quantile_huber(tau: f64, u: f64, kappa: f64) -> Result<f64, QuantileError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(QuantileError::TauOutOfRange(tau));
    }
    Ok(QuantileHuber::new(kappa)?.loss(tau, u))
}

/// Lower-tail CVaR of an equal-weight sample: mean of the lowest `alpha`
/// fraction, with the boundary atom weighted fractionally.
pub fn cvar_lower(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    sort_row(&mut v);
    cvar_lower_sorted(&v, alpha)
}

pub(crate) fn cvar_lower_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let k = alpha.clamp(0.0, 1.0) * sorted.len() as f64;
    if k <= 0.0 {
        return sorted[0];
    }
    let whole = ((k + 1e-9).floor() as usize).min(sorted.len());
    let mut acc: f64 = sorted[..whole].iter().sum();
    let frac = k - whole as f64;
    if frac > 1e-9 {
        acc += frac * sorted[whole];
    }
    acc / k
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cdf_examples() {
        let row = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cdf_row(&row, 2.0), 0.5);
        assert_eq!(cdf_row(&row, 0.5), 0.0);
        assert_eq!(cdf_row(&row, 4.0), 1.0);
        assert_eq!(cdf_row(&row, 7.0), 1.0);
        let mix = AtomMixture::new(vec![0.0, 1.0], vec![0.3, 0.7]).unwrap();
        assert!((mix.cdf(0.5) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn inverse_cdf_examples() {
        let row = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(inverse_cdf_row(&row, 0.5).unwrap(), 2.0);
        assert_eq!(inverse_cdf_row(&row, 0.500001).unwrap(), 3.0);
        assert_eq!(inverse_cdf_row(&row, 0.0).unwrap(), 1.0);
        assert_eq!(inverse_cdf_row(&row, 1.0).unwrap(), 4.0);
        assert!(inverse_cdf_row(&row, 1.5).is_err());
        let mix = AtomMixture::uniform(&row);
        assert_eq!(inverse_cdf(&mix, 0.5).unwrap(), 2.0);
        assert_eq!(inverse_cdf(&mix, 0.500001).unwrap(), 3.0);
        for tau in [0.0, 0.3, 1.0] {
            assert_eq!(inverse_cdf(&AtomMixture::point(2.5), tau).unwrap(), 2.5);
        }
        assert!(inverse_cdf(&mix, -0.1).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let a = AtomMixture::uniform(&[0.0, 2.0]);
        let b = AtomMixture::uniform(&[1.0, 3.0]);
        // piecewise integral: 0.5 * |0-1| + 0.5 * |2-3|
        let oracle = 0.5 * 1.0 + 0.5 * 1.0;
        assert!((wasserstein(&a, &b, 1.0).unwrap() - oracle).abs() < 1e-15);
        for p in [1.0, 2.0, 3.5, f64::INFINITY] {
            let d = wasserstein(&AtomMixture::point(0.0), &AtomMixture::point(1.0), p).unwrap();
            assert!((d - 1.0).abs() < 1e-15);
            assert_eq!(wasserstein(&a, &a, p).unwrap(), 0.0);
        }
        assert!(matches!(
            wasserstein(&a, &b, 0.5),
            Err(QuantileError::InvalidOrder(_))
        ));
    }

    #[test]
    fn wasserstein_unequal_weights_by_hand() {
        // a: 0 w.p. 0.3, 1 w.p. 0.7 ; b: 0.5 w.p. 1
        let a = AtomMixture::new(vec![0.0, 1.0], vec![0.3, 0.7]).unwrap();
        let b = AtomMixture::point(0.5);
        let w1 = wasserstein(&a, &b, 1.0).unwrap();
        assert!((w1 - (0.3 * 0.5 + 0.7 * 0.5)).abs() < 1e-15);
        let w2 = wasserstein(&a, &b, 2.0).unwrap();
        assert!((w2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sup_wasserstein_examples() {
        let shape = TableShape::new(2, 2, 3);
        let eta = QuantileTable::new(shape, (0..12).map(|x| x as f64 * 0.3).collect()).unwrap();
        assert_eq!(sup_wasserstein(&eta, &eta, f64::INFINITY).unwrap(), 0.0);
        let mut shifted = eta.clone();
        let row: Vec<f64> = shifted.row(1, 0).iter().map(|x| x + 0.7).collect();
        shifted.set_row(1, 0, &row).unwrap();
        let d = sup_wasserstein(&eta, &shifted, f64::INFINITY).unwrap();
        assert!((d - 0.7).abs() < 1e-12);
        let other = QuantileTable::zeros(TableShape::new(3, 2, 3));
        assert!(sup_wasserstein(&eta, &other, 1.0).is_err());
    }

    #[test]
    fn projection_examples() {
        let u = RewardDist::Uniform { lo: 0.0, hi: 1.0 };
        assert_eq!(project_w1(&u, 2), vec![0.25, 0.75]);
        let oracle: Vec<f64> = (1..=4).map(|m| (2 * m - 1) as f64 / 8.0).collect();
        assert_eq!(project_w1(&u, 4), oracle);
        assert_eq!(project_w1(&AtomMixture::point(1.5), 5), vec![1.5; 5]);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(quantile_huber(0.3, 0.0, 1.0).unwrap(), 0.0);
        let oracle = (0.5f64 - 0.0).abs() * 0.5 * 0.5 * 0.5;
        assert!((quantile_huber(0.5, 0.5, 1.0).unwrap() - oracle).abs() < 1e-15);
        let oracle = (0.9f64 - 1.0).abs() * (1.0 * (2.0 - 0.5));
        assert!((quantile_huber(0.9, -2.0, 1.0).unwrap() - oracle).abs() < 1e-15);
        assert!(quantile_huber(0.5, 1.0, 0.0).is_err());
        assert!(quantile_huber(0.5, 1.0, -1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let shape = TableShape::new(2, 3, 4);
        let eta = QuantileTable::new(shape, (0..24).map(|x| (x as f64).sin()).collect()).unwrap();
        let mut buf = Vec::new();
        eta.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# M=4\n0,0,0,"));
        let back = QuantileTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, eta);
    }

    #[test]
    fn cvar_examples() {
        let row = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(cvar_lower(&row, 1.0), 2.5);
        assert_eq!(cvar_lower(&row, 0.5), 1.5);
        assert_eq!(cvar_lower(&row, 0.25), 1.0);
        // 0.375 * 4 = 1.5 atoms: (1 + 0.5 * 2) / 1.5
        assert!((cvar_lower(&row, 0.375) - 2.0 / 1.5).abs() < 1e-15);
        let samples: Vec<f64> = (0..10).map(|x| x as f64).collect();
        assert_eq!(cvar_lower(&samples, 0.1), 0.0);
    }

    fn arb_row(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, m)
    }

    fn arb_mixture() -> impl Strategy<Value = AtomMixture> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(v, w)| AtomMixture::from_unnormalized(v, w).unwrap())
        })
    }

    proptest! {
        #[test]
        fn galois_connection(row in arb_row(7), tau in 0.0f64..=1.0) {
            let mix = AtomMixture::uniform(&row);
            for &z in &row {
                prop_assert!(inverse_cdf(&mix, mix.cdf(z)).unwrap() <= z);
            }
            prop_assert!(mix.cdf(inverse_cdf(&mix, tau).unwrap()) >= tau - 1e-12);
            prop_assert_eq!(inverse_cdf(&mix, tau).unwrap(), inverse_cdf_row(&row, tau).unwrap());
        }

        #[test]
        fn wasserstein_is_a_metric(a in arb_mixture(), b in arb_mixture(), c in arb_mixture(),
                                   p in prop::sample::select(vec![1.0, 2.0, 3.0, f64::INFINITY])) {
            let ab = wasserstein(&a, &b, p).unwrap();
            let ba = wasserstein(&b, &a, p).unwrap();
            let ac = wasserstein(&a, &c, p).unwrap();
            let cb = wasserstein(&c, &b, p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(wasserstein(&a, &a, p).unwrap() < 1e-12);
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn row_fast_path_matches_mixture(a in arb_row(6), b in arb_row(6),
                                        p in prop::sample::select(vec![1.0, 2.0, f64::INFINITY])) {
            let fast = wasserstein_rows(&a, &b, p).unwrap();
            let slow = wasserstein(&AtomMixture::uniform(&a), &AtomMixture::uniform(&b), p).unwrap();
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn sup_dominates_every_pair(x in arb_row(12), y in arb_row(12)) {
            let shape = TableShape::new(2, 2, 3);
            let ea = QuantileTable::new(shape, x).unwrap();
            let eb = QuantileTable::new(shape, y).unwrap();
            for p in [1.0, f64::INFINITY] {
                let sup = sup_wasserstein(&ea, &eb, p).unwrap();
                for s in 0..2 { for a in 0..2 {
                    prop_assert!(sup >= wasserstein_rows(ea.row(s, a), eb.row(s, a), p).unwrap());
                }}
            }
        }

        #[test]
        fn huber_derivative_matches_finite_differences(tau in 0.0f64..=1.0, u in -4.0f64..4.0,
                                                      kappa in 0.1f64..2.0) {
            // stay away from the kinks at 0 and +-kappa
            prop_assume!(u.abs() > 1e-3 && (u.abs() - kappa).abs() > 1e-3);
            let h = QuantileHuber::new(kappa).unwrap();
            let step = 1e-6;
            let fd = (h.loss(tau, u + step) - h.loss(tau, u - step)) / (2.0 * step);
            prop_assert!((fd - h.derivative(tau, u)).abs() < 1e-5);
        }
    }

    #[test]
    fn projection_beats_random_alternatives() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.random_range(2..12);
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let target = AtomMixture::from_unnormalized(values, weights).unwrap();
            let m = rng.random_range(1..6);
            let proj = project_mixture(&target, m);
            assert_eq!(proj, project_w1(&target, m));
            let best = wasserstein(&target, &AtomMixture::uniform(&proj), 1.0).unwrap();
            for _ in 0..1000 {
                let alt: Vec<f64> = if rng.random_bool(0.5) {
                    (0..m).map(|_| rng.random_range(-2.5..2.5)).collect()
                } else {
                    proj.iter().map(|x| x + rng.random_range(-0.2..0.2)).collect()
                };
                let d = wasserstein(&target, &AtomMixture::uniform(&alt), 1.0).unwrap();
                assert!(best <= d + 1e-12, "projection {best} vs alternative {d}");
            }
        }
    }
}
