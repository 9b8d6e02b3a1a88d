//! Analysis of aggregation-matrix chains: second eigenvalues of suffix
//! products, the disagreement bound and its linearized replay.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bayes::{log_pool_uniform, DiagonalGaussian};
use crate::error::{Error, Result};

pub const ROW_SUM_TOL: f64 = 1e-9;

/// Row-stochastic aggregation matrix; row i holds the weights device i puts
/// on each sender.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMatrix(DMatrix<f64>);

impl AggregationMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        validate_row_stochastic(&m)?;
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: r.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn uniform(n: usize) -> Self {
        Self(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Restriction to `keep`, rows renormalized. A row with no mass left on
    /// `keep` becomes a self-loop.
    pub fn submatrix(&self, keep: &[usize]) -> Self {
        let n = keep.len();
        let mut m = DMatrix::zeros(n, n);
        for (a, &i) in keep.iter().enumerate() {
            let total: f64 = keep.iter().map(|&j| self.0[(i, j)]).sum();
            if total > 0.0 {
                for (b, &j) in keep.iter().enumerate() {
                    m[(a, b)] = self.0[(i, j)] / total;
                }
            } else {
                m[(a, a)] = 1.0;
            }
        }
        Self(m)
    }
}

pub fn validate_row_stochastic(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    let mut bad = Vec::new();
    for (i, row) in m.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        let in_range = row.iter().all(|&a| (0.0..=1.0).contains(&a));
        if !in_range || (sum - 1.0).abs() > ROW_SUM_TOL {
            bad.push(format!("row {i} (sum {sum})"));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::NotRowStochastic(bad.join(", ")))
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// in descending order.
pub fn symmetric_eigenvalues(s: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: s.ncols(),
        });
    }
    let mut a = s.clone();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[(p, q)] * a[(p, q)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

fn suffix_product(chain: &[AggregationMatrix], tau: usize) -> Result<DMatrix<f64>> {
    let first = chain.get(tau).ok_or(Error::Empty("aggregation chain suffix"))?;
    let n = first.len();
    let mut q = DMatrix::identity(n, n);
    for a in &chain[tau..] {
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: a.len(),
            });
        }
        q *= a.0.transpose();
    }
    Ok(q)
}

/// Second-largest eigenvalue of Q Qᵀ for Q the product of transposes from
/// `tau` (zero based) to the end of the chain, without clamping.
pub fn second_eigenvalue_raw(chain: &[AggregationMatrix], tau: usize) -> Result<f64> {
    let q = suffix_product(chain, tau)?;
    let s = &q * q.transpose();
    let ev = symmetric_eigenvalues(&s)?;
    Ok(ev.get(1).copied().unwrap_or(0.0))
}

/// Same as [`second_eigenvalue_raw`], clamped to [0, 1]. Products that are
/// not doubly stochastic can exceed 1 before clamping.
pub fn second_eigenvalue(chain: &[AggregationMatrix], tau: usize) -> Result<f64> {
    Ok(second_eigenvalue_raw(chain, tau)?.clamp(0.0, 1.0))
}

/// ξ for every suffix of the chain.
pub fn chain_spectrum(chain: &[AggregationMatrix]) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::Empty("aggregation chain"));
    }
    let n = chain[0].len();
    let mut q = DMatrix::identity(n, n);
    let mut out = vec![0.0; chain.len()];
    for tau in (0..chain.len()).rev() {
        let a = &chain[tau];
        if a.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: a.len(),
            });
        }
        q = a.0.transpose() * q;
        let ev = symmetric_eigenvalues(&(&q * q.transpose()))?;
        out[tau] = ev.get(1).copied().unwrap_or(0.0).clamp(0.0, 1.0);
    }
    Ok(out)
}

fn coefficients(p: &DiagonalGaussian) -> impl Iterator<Item = [f64; 3]> + '_ {
    p.mean().iter().zip(p.std()).map(|(&m, &s)| {
        let v = s * s;
        [-0.5 / v, m / v, -0.5 * m * m / v - s.ln()]
    })
}

/// Mean squared distance between each log density and the log density of
/// the uniform pool, measured on per-dimension polynomial coefficients.
pub fn disagreement(posteriors: &[&DiagonalGaussian]) -> Result<f64> {
    if posteriors.is_empty() {
        return Err(Error::Empty("posteriors"));
    }
    let pooled = log_pool_uniform(posteriors)?;
    let star: Vec<[f64; 3]> = coefficients(&pooled).collect();
    let mut total = 0.0;
    for p in posteriors {
        for (c, s) in coefficients(p).zip(&star) {
            total += (0..3).map(|k| (c[k] - s[k]).powi(2)).sum::<f64>();
        }
    }
    Ok(total / posteriors.len() as f64)
}

/// (L √M Σ √ξ)².
pub fn theorem1_bound(l: f64, m: usize, xi: &[f64]) -> f64 {
    let s: f64 = xi.iter().map(|x| x.max(0.0).sqrt()).sum();
    (l * (m as f64).sqrt() * s).powi(2)
}

/// Linearized run: a chain of aggregation matrices with the per-round
/// innovation matrices (dims × devices) injected before each mixing step.
#[derive(Debug, Clone)]
pub struct LinearTrace {
    pub lipschitz: f64,
    pub chain: Vec<AggregationMatrix>,
    pub innovations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub xi: Vec<f64>,
}

pub fn check_bound(trace: &LinearTrace) -> Result<BoundCheck> {
    let t = trace.chain.len();
    if t == 0 {
        return Err(Error::Empty("aggregation chain"));
    }
    if trace.innovations.len() != t {
        return Err(Error::DimensionMismatch {
            expected: t,
            actual: trace.innovations.len(),
        });
    }
    let m = trace.chain[0].len();
    let v = trace.innovations[0].nrows();
    let j = DMatrix::from_element(m, m, 1.0 / m as f64);
    let centering = DMatrix::identity(m, m) - j;
    let mut e = DMatrix::zeros(v, m);
    for (step, (a, g)) in trace.chain.iter().zip(&trace.innovations).enumerate() {
        if a.len() != m || g.ncols() != m || g.nrows() != v {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: g.ncols(),
            });
        }
        for col in g.column_iter() {
            let norm = col.norm();
            if norm > trace.lipschitz * (1.0 + 1e-9) {
                return Err(Error::BoundViolated {
                    step,
                    norm,
                    bound: trace.lipschitz,
                });
            }
        }
        let at = a.0.transpose();
        e = &e * &at + g * &at * &centering;
    }
    let lhs = e.norm_squared() / m as f64;
    let xi = chain_spectrum(&trace.chain)?;
    let rhs = theorem1_bound(trace.lipschitz, m, &xi);
    Ok(BoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12) + 1e-12,
        xi,
    })
}

/// Random convex combination of permutation matrices.
pub fn random_doubly_stochastic<R: Rng + ?Sized>(m: usize, rng: &mut R) -> AggregationMatrix {
    let terms = rng.random_range(1..=m.max(2));
    let mut weights: Vec<f64> = (0..terms).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut a = DMatrix::zeros(m, m);
    let mut perm: Vec<usize> = (0..m).collect();
    for w in weights {
        perm.shuffle(rng);
        for (i, &p) in perm.iter().enumerate() {
            a[(i, p)] += w;
        }
    }
    normalize_rows(&mut a);
    AggregationMatrix(a)
}

/// Random row-stochastic matrix with uniform entries before normalization.
pub fn random_row_stochastic<R: Rng + ?Sized>(m: usize, rng: &mut R) -> AggregationMatrix {
    let mut a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>());
    normalize_rows(&mut a);
    AggregationMatrix(a)
}

fn normalize_rows(a: &mut DMatrix<f64>) {
    for mut row in a.row_iter_mut() {
        let s: f64 = row.iter().sum();
        row /= s;
    }
}

/// Innovation matrix whose columns all have norm exactly `l`.
pub fn random_innovation<R: Rng + ?Sized>(dims: usize, m: usize, l: f64, rng: &mut R) -> DMatrix<f64> {
    let mut g = DMatrix::from_fn(dims, m, |_, _| StandardNormal.sample(rng));
    for mut col in g.column_iter_mut() {
        let n = col.norm();
        col *= l / n;
    }
    g
}

/// An admissible trace: doubly stochastic mixing and innovations at the
/// norm limit.
pub fn random_admissible_trace<R: Rng + ?Sized>(m: usize, t: usize, dims: usize, l: f64, rng: &mut R) -> LinearTrace {
    let chain = (0..t).map(|_| random_doubly_stochastic(m, rng)).collect();
    let innovations = (0..t).map(|_| random_innovation(dims, m, l, rng)).collect();
    LinearTrace {
        lipschitz: l,
        chain,
        innovations,
    }
}
