//! Device roles, the prior-approximation attack, Byzantine injection and
//! detection, and evaluation of the security and privacy constraints.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes::{kl_diag_gaussian, log_pool_uniform, DiagonalGaussian};
use crate::error::{Error, Result};

/// Std range of injected Byzantine posteriors.
pub const BYZANTINE_STD_RANGE: (f64, f64) = (0.05, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRole {
    Conventional,
    HonestButCurious,
    Byzantine,
}

impl DeviceRole {
    /// Conventional and honest-but-curious devices both train.
    pub fn is_standard(self) -> bool {
        !matches!(self, DeviceRole::Byzantine)
    }
}

/// Symmetric, zero-diagonal 0/1 connection matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionMatrix {
    links: Vec<Vec<bool>>,
}

impl ConnectionMatrix {
    pub fn empty(devices: usize) -> Self {
        Self {
            links: vec![vec![false; devices]; devices],
        }
    }

    pub fn from_rows(links: Vec<Vec<bool>>) -> Result<Self> {
        let n = links.len();
        for (i, row) in links.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: row.len(),
                });
            }
            if row[i] {
                return Err(Error::Config(format!("connection matrix has a self-link at {i}")));
            }
            for (j, &b) in row.iter().enumerate() {
                if b != links[j][i] {
                    return Err(Error::Config(format!("connection matrix is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { links })
    }

    /// Fully connected topology.
    pub fn complete(devices: usize) -> Self {
        let links = (0..devices).map(|i| (0..devices).map(|j| i != j).collect()).collect();
        Self { links }
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn connect(&mut self, i: usize, j: usize) {
        assert_ne!(i, j, "self-links are not allowed");
        self.links[i][j] = true;
        self.links[j][i] = true;
    }

    pub fn disconnect(&mut self, i: usize, j: usize) {
        self.links[i][j] = false;
        self.links[j][i] = false;
    }

    pub fn is_connected(&self, i: usize, j: usize) -> bool {
        self.links[i][j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.links[i]
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.links
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.links[i].iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.links[i].iter().filter(|&&b| b).count()
    }

    pub fn link_count(&self) -> usize {
        (0..self.len()).map(|i| self.degree(i)).sum::<usize>() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Threshold is median + `k_mad` * MAD of the neighborhood statistics.
    pub k_mad: f64,
    /// Largest aggregation weight tolerated on a flagged device.
    pub security_tolerance: f64,
    /// Smallest tolerated prior gap H on an exposed link.
    pub privacy_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            k_mad: 3.0,
            security_tolerance: 0.1,
            privacy_threshold: 0.05,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_mad > 0.0) {
            return Err(Error::Config("k_mad must be > 0".into()));
        }
        if !(self.security_tolerance > 0.0 && self.security_tolerance < 1.0) {
            return Err(Error::Config("security_tolerance must lie in (0, 1)".into()));
        }
        if !(self.privacy_threshold >= 0.0) {
            return Err(Error::Config("privacy_threshold must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-round record of constraint evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub security: Vec<(usize, usize, f64)>,
    pub privacy: Vec<(usize, usize, f64)>,
    /// `detection[i][j]`: device i flags device j.
    pub detection: Vec<Vec<bool>>,
}

/// A random posterior sent by a Byzantine device instead of a trained one.
pub fn byzantine_posterior<R: Rng + ?Sized>(dims: usize, rng: &mut R) -> Result<DiagonalGaussian> {
    let (lo, hi) = BYZANTINE_STD_RANGE;
    let mean = (0..dims).map(|_| StandardNormal.sample(rng)).collect();
    let std = (0..dims)
        .map(|_| {
            // open interval: redraw the endpoint
            loop {
                let s = rng.random_range(lo..hi);
                if s > lo {
                    break s;
                }
            }
        })
        .collect();
    DiagonalGaussian::new(mean, std)
}

/// Devices that received i's posterior in both the previous and current round.
pub fn exposure_vector(prev: &ConnectionMatrix, curr: &ConnectionMatrix, i: usize) -> Vec<bool> {
    prev.row(i).iter().zip(curr.row(i)).map(|(a, b)| *a && *b).collect()
}

/// Devices connected to both i and j.
pub fn common_neighbors(u: &ConnectionMatrix, i: usize, j: usize) -> Vec<bool> {
    u.row(i).iter().zip(u.row(j)).map(|(a, b)| *a && *b).collect()
}

/// Uniform log pool of the posteriors selected by `r`; `None` when `r` is empty.
pub fn approximate_prior(posteriors: &[DiagonalGaussian], r: &[bool]) -> Result<Option<DiagonalGaussian>> {
    if r.len() != posteriors.len() {
        return Err(Error::DimensionMismatch {
            expected: posteriors.len(),
            actual: r.len(),
        });
    }
    let members: Vec<&DiagonalGaussian> = posteriors.iter().zip(r).filter(|(_, &b)| b).map(|(p, _)| p).collect();
    if members.is_empty() {
        return Ok(None);
    }
    log_pool_uniform(&members).map(Some)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Result of one device screening its neighbors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detection {
    /// KL(received_j || approximation_j) for every scorable neighbor.
    pub statistics: BTreeMap<usize, f64>,
    /// `None` when the evidence guards suppress flagging.
    pub threshold: Option<f64>,
    pub flagged: BTreeSet<usize>,
}

impl Detection {
    pub fn row(&self, devices: usize) -> Vec<bool> {
        (0..devices).map(|j| self.flagged.contains(&j)).collect()
    }

    pub fn max_statistic(&self) -> Option<(usize, f64)> {
        self.statistics
            .iter()
            .fold(None, |best: Option<(usize, f64)>, (&j, &s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((j, s)),
            })
    }
}

/// Minimum number of statistics before anything is flagged.
pub const MIN_EVIDENCE: usize = 3;

/// Flags neighbors whose posterior sits unusually far (in KL) from the prior
/// this device can reconstruct for them.
pub fn detect_byzantine(
    received: &BTreeMap<usize, DiagonalGaussian>,
    approximations: &BTreeMap<usize, DiagonalGaussian>,
    cfg: &DetectorConfig,
) -> Result<Detection> {
    let mut statistics = BTreeMap::new();
    for (&j, post) in received {
        if let Some(approx) = approximations.get(&j) {
            statistics.insert(j, kl_diag_gaussian(post, approx)?);
        }
    }
    let mut out = Detection {
        statistics,
        ..Default::default()
    };
    if out.statistics.len() < MIN_EVIDENCE {
        return Ok(out);
    }
    let values: Vec<f64> = out.statistics.values().copied().collect();
    let med = median(&values);
    let deviations: Vec<f64> = values.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&deviations);
    if mad == 0.0 {
        return Ok(out);
    }
    let kappa = med + cfg.k_mad * mad;
    out.threshold = Some(kappa);
    out.flagged = out.statistics.iter().filter(|(_, &s)| s >= kappa).map(|(&j, _)| j).collect();
    Ok(out)
}

/// Flagged neighbors whose aggregation weight exceeds the tolerance.
pub fn check_security(i: usize, a_row: &[f64], b_row: &[bool], tolerance: f64) -> Vec<(usize, usize, f64)> {
    a_row
        .iter()
        .zip(b_row)
        .enumerate()
        .filter(|(_, (&a, &b))| b && a > tolerance)
        .map(|(j, (&a, _))| (i, j, a))
        .collect()
}

/// Exposed neighbors whose reconstruction gap falls below the threshold.
pub fn check_privacy(i: usize, exposure: &[bool], gaps: &BTreeMap<usize, f64>, threshold: f64) -> Vec<(usize, usize, f64)> {
    gaps.iter()
        .filter(|(&j, &h)| exposure.get(j).copied().unwrap_or(false) && h < threshold)
        .map(|(&j, &h)| (i, j, h))
        .collect()
}
