//! Closed-form algebra on diagonal Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of log-pool weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

/// A fully factorized Gaussian over `dim()` model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("gaussian dimension"));
        }
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: std.len(),
            });
        }
        if let Some((index, &value)) = std
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::NonPositiveStd { index, value });
        }
        Ok(Self { mean, std })
    }

    /// Same mean and std in every coordinate.
    pub fn isotropic(dim: usize, mean: f64, std: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![std; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn precision(&self) -> impl Iterator<Item = f64> + '_ {
        self.std.iter().map(|s| 1.0 / (s * s))
    }

    pub(crate) fn check_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    /// Log density at `w`.
    pub fn log_density(&self, w: &[f64]) -> f64 {
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        self.mean
            .iter()
            .zip(&self.std)
            .zip(w)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - half_log_2pi
            })
            .sum()
    }
}

/// KL(p || q) for diagonal Gaussians.
pub fn kl_diag_gaussian(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    p.check_same_dim(q)?;
    let kl = p
        .mean
        .iter()
        .zip(&p.std)
        .zip(q.mean.iter().zip(&q.std))
        .map(|((mp, sp), (mq, sq))| {
            let d = mp - mq;
            (sq / sp).ln() + (sp * sp + d * d) / (2.0 * sq * sq) - 0.5
        })
        .sum::<f64>();
    // Round-off can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

/// Normalized logarithmic opinion pool: the Gaussian proportional to
/// `exp(sum_j a_j log P_j)`.
///
/// Precision is the weighted sum of component precisions; the mean is the
/// precision-weighted average of component means.
pub fn log_pool(components: &[(&DiagonalGaussian, f64)]) -> Result<DiagonalGaussian> {
    let (first, _) = components.first().ok_or(Error::Empty("log-pool components"))?;
    let dim = first.dim();
    let mut total = 0.0;
    for (g, w) in components {
        first.check_same_dim(g)?;
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidWeight(*w));
        }
        total += w;
    }
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::WeightSum(total));
    }
    if components.iter().all(|(_, w)| *w == 0.0) {
        return Err(Error::Empty("log-pool components with positive weight"));
    }
    let mut active = components.iter().filter(|(_, w)| *w > 0.0);
    if let (Some((only, _)), None) = (active.next(), active.next()) {
        return Ok((*only).clone());
    }

    let mut precision = vec![0.0; dim];
    let mut info = vec![0.0; dim];
    for (g, w) in components.iter().filter(|(_, w)| *w > 0.0) {
        for z in 0..dim {
            let tau = w / (g.std[z] * g.std[z]);
            precision[z] += tau;
            info[z] += tau * g.mean[z];
        }
    }
    let mean = info.iter().zip(&precision).map(|(i, p)| i / p).collect();
    let std = precision.iter().map(|p| 1.0 / p.sqrt()).collect();
    DiagonalGaussian::new(mean, std)
}

/// Uniform-weight log pool.
pub fn log_pool_uniform(components: &[&DiagonalGaussian]) -> Result<DiagonalGaussian> {
    if components.is_empty() {
        return Err(Error::Empty("log-pool components"));
    }
    let w = 1.0 / components.len() as f64;
    let weighted: Vec<_> = components.iter().map(|g| (*g, w)).collect();
    log_pool(&weighted)
}

/// Squared parameter distance between two Gaussians: the privacy-gap metric.
pub fn prior_gap_h(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    a.check_same_dim(b)?;
    Ok(a
        .mean
        .iter()
        .zip(&b.mean)
        .zip(a.std.iter().zip(&b.std))
        .map(|((ma, mb), (sa, sb))| (ma - mb).powi(2) + (sa - sb).powi(2))
        .sum())
}
