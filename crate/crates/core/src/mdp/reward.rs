use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use super::{sample_index, PROB_TOL};

/// Bounded immediate-reward distribution `R(s,a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardDist {
    PointMassMixture { values: Vec<f64>, weights: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
    TruncatedGaussian { mean: f64, std: f64, lo: f64, hi: f64 },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

impl RewardDist {
    /// Dirac mass at `value`.
    pub fn point(value: f64) -> Self {
        RewardDist::PointMassMixture {
            values: vec![value],
            weights: vec![1.0],
        }
    }

    pub fn mixture(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, super::MdpError> {
        let r = RewardDist::PointMassMixture { values, weights };
        r.validate().map_err(super::MdpError::RewardSpec)?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            RewardDist::PointMassMixture { values, weights } => {
                if values.is_empty() || values.len() != weights.len() {
                    return Err(format!(
                        "mixture needs matching nonempty values/weights ({} vs {})",
                        values.len(),
                        weights.len()
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err("mixture values must be finite".into());
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return Err("mixture weights must be nonnegative".into());
                }
                let sum: f64 = weights.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(format!("mixture weights sum to {sum}"));
                }
                Ok(())
            }
            RewardDist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(format!("uniform support needs lo < hi, got [{lo}, {hi}]"));
                }
                Ok(())
            }
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(format!("truncation needs lo < hi, got [{lo}, {hi}]"));
                }
                if !(std.is_finite() && *std > 0.0 && mean.is_finite()) {
                    return Err(format!("gaussian needs finite mean and std > 0, got std={std}"));
                }
                let mass = self.gaussian_mass();
                if !(mass > 0.0) {
                    return Err("truncation interval carries no gaussian mass".into());
                }
                Ok(())
            }
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self, RewardDist::PointMassMixture { .. })
    }

    /// Closed support `[lo, hi]`.
    pub fn support(&self) -> (f64, f64) {
        match self {
            RewardDist::PointMassMixture { values, .. } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
                    (l.min(*v), h.max(*v))
                }),
            RewardDist::Uniform { lo, hi } | RewardDist::TruncatedGaussian { lo, hi, .. } => {
                (*lo, *hi)
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let (lo, hi) = self.support();
        lo.abs().max(hi.abs())
    }

    fn gaussian_mass(&self) -> f64 {
        match self {
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                std_normal_cdf((hi - mean) / std) - std_normal_cdf((lo - mean) / std)
            }
            _ => 1.0,
        }
    }

    /// `P(R <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            RewardDist::PointMassMixture { values, weights } => values
                .iter()
                .zip(weights)
                .filter(|(v, _)| **v <= x)
                .map(|(_, w)| *w)
                .sum::<f64>()
                .min(1.0),
            RewardDist::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                if x < *lo {
                    0.0
                } else if x >= *hi {
                    1.0
                } else {
                    let base = std_normal_cdf((lo - mean) / std);
                    ((std_normal_cdf((x - mean) / std) - base) / self.gaussian_mass())
                        .clamp(0.0, 1.0)
                }
            }
        }
    }

    /// Density on the closed support; `None` for point-mass mixtures.
    pub fn pdf(&self, x: f64) -> Option<f64> {
        match self {
            RewardDist::PointMassMixture { .. } => None,
            RewardDist::Uniform { lo, hi } => Some(if x >= *lo && x <= *hi {
                1.0 / (hi - lo)
            } else {
                0.0
            }),
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => Some(if x >= *lo && x <= *hi {
                std_normal_pdf((x - mean) / std) / (std * self.gaussian_mass())
            } else {
                0.0
            }),
        }
    }

    /// `inf { x : tau <= P(R <= x) }`, with `tau = 0` mapped to the support minimum.
    pub fn quantile(&self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, 1.0);
        match self {
            RewardDist::PointMassMixture { values, weights } => {
                let mut pairs: Vec<(f64, f64)> =
                    values.iter().copied().zip(weights.iter().copied()).collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                for (v, w) in &pairs {
                    if *w <= 0.0 {
                        continue;
                    }
                    acc += w;
                    if acc >= tau - crate::quantile::TIE_EPS {
                        return *v;
                    }
                }
                pairs
                    .iter()
                    .rev()
                    .find(|(_, w)| *w > 0.0)
                    .map(|(v, _)| *v)
                    .unwrap_or(f64::NAN)
            }
            RewardDist::Uniform { lo, hi } => lo + tau * (hi - lo),
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                let a = std_normal_cdf((lo - mean) / std);
                let b = std_normal_cdf((hi - mean) / std);
                let p = a + tau * (b - a);
                if p <= 0.0 {
                    return *lo;
                }
                if p >= 1.0 {
                    return *hi;
                }
                (mean + std * std_normal_quantile(p)).clamp(*lo, *hi)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            RewardDist::PointMassMixture { values, weights } => {
                values.iter().zip(weights).map(|(v, w)| v * w).sum()
            }
            RewardDist::Uniform { lo, hi } => 0.5 * (lo + hi),
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                let alpha = (lo - mean) / std;
                let beta = (hi - mean) / std;
                mean + std * (std_normal_pdf(alpha) - std_normal_pdf(beta)) / self.gaussian_mass()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            RewardDist::PointMassMixture { values, weights } => {
                if values.len() == 1 {
                    values[0]
                } else {
                    values[sample_index(weights, rng)]
                }
            }
            RewardDist::Uniform { lo, hi } => {
                let u: f64 = rng.random();
                lo + u * (hi - lo)
            }
            RewardDist::TruncatedGaussian { .. } => {
                let u: f64 = rng.random();
                self.quantile(u)
            }
        }
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        match self {
            RewardDist::PointMassMixture { values, weights } => {
                h.update([0u8]);
                for v in values.iter().chain(weights) {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            RewardDist::Uniform { lo, hi } => {
                h.update([1u8]);
                h.update(lo.to_bits().to_le_bytes());
                h.update(hi.to_bits().to_le_bytes());
            }
            RewardDist::TruncatedGaussian { mean, std, lo, hi } => {
                h.update([2u8]);
                for v in [mean, std, lo, hi] {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
    }
}
