//! Reparameterized ELBO, its gradient, and the local SGD step.

use rand::seq::index;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::classifier::{Batch, BayesClassifier, Dataset};
use super::gaussian::{kl_diag_gaussian, DiagonalGaussian};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

/// Floor applied to every posterior std after an SGD step.
pub const SIGMA_MIN: f64 = 1e-4;

const NOISE_STREAM: u64 = 0xE5;
const BATCH_STREAM: u64 = 0xBA;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(default = "default_sigma_min")]
    pub sigma_min: f64,
}

fn default_sigma_min() -> f64 {
    SIGMA_MIN
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            mc_samples: 3,
            seed: 0,
            sigma_min: SIGMA_MIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0 (got {})", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Standard-normal draws `eps[s][z]` for the reparameterization `w = mu + sigma * eps`.
pub fn draw_noise(seed: u64, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[NOISE_STREAM]);
    (0..samples)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn check_dims(model: &BayesClassifier, q: &DiagonalGaussian, prior: &DiagonalGaussian) -> Result<()> {
    q.check_same_dim(prior)?;
    if q.dim() != model.dims() {
        return Err(Error::DimensionMismatch {
            expected: model.dims(),
            actual: q.dim(),
        });
    }
    Ok(())
}

fn sample_weights(q: &DiagonalGaussian, eps: &[f64]) -> Vec<f64> {
    q.mean().iter().zip(q.std()).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

fn likelihood_coef(batch: &Batch<'_>) -> f64 {
    if batch.is_empty() {
        0.0
    } else {
        batch.scale() / batch.len() as f64
    }
}

/// ELBO with caller-supplied noise. Each `eps[s]` must have length V.
pub fn elbo_with_noise(
    model: &BayesClassifier,
    q: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    batch: &Batch<'_>,
    eps: &[Vec<f64>],
) -> Result<f64> {
    check_dims(model, q, prior)?;
    if eps.is_empty() {
        return Err(Error::Empty("monte-carlo noise"));
    }
    let coef = likelihood_coef(batch);
    let mut expected_ll = 0.0;
    for e in eps {
        if e.len() != q.dim() {
            return Err(Error::DimensionMismatch {
                expected: q.dim(),
                actual: e.len(),
            });
        }
        let w = sample_weights(q, e);
        expected_ll += coef * super::classifier::log_likelihood(model, &w, batch)?;
    }
    expected_ll /= eps.len() as f64;
    Ok(expected_ll - kl_diag_gaussian(q, prior)?)
}

/// Monte-Carlo ELBO: expected scaled log-likelihood under `q` minus KL(q || prior).
pub fn elbo(
    model: &BayesClassifier,
    q: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let eps = draw_noise(cfg.seed, cfg.mc_samples, q.dim());
    elbo_with_noise(model, q, prior, batch, &eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn elbo_gradient_with_noise(
    model: &BayesClassifier,
    q: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    batch: &Batch<'_>,
    eps: &[Vec<f64>],
) -> Result<ElboGradient> {
    check_dims(model, q, prior)?;
    if eps.is_empty() {
        return Err(Error::Empty("monte-carlo noise"));
    }
    let dim = q.dim();
    let coef = likelihood_coef(batch) / eps.len() as f64;
    let mut g_mean = vec![0.0; dim];
    let mut g_std = vec![0.0; dim];
    let mut g_w = vec![0.0; dim];
    for e in eps {
        if e.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.len(),
            });
        }
        let w = sample_weights(q, e);
        g_w.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in batch.samples() {
            if *y >= model.classes {
                return Err(Error::LabelOutOfRange {
                    label: *y,
                    classes: model.classes,
                });
            }
            model.accumulate_grad(&w, x, *y, coef, &mut g_w);
        }
        for z in 0..dim {
            g_mean[z] += g_w[z];
            g_std[z] += g_w[z] * e[z];
        }
    }
    // Analytic KL(q || prior) gradient, subtracted.
    for z in 0..dim {
        let (m, s) = (q.mean()[z], q.std()[z]);
        let (m0, s0) = (prior.mean()[z], prior.std()[z]);
        g_mean[z] -= (m - m0) / (s0 * s0);
        g_std[z] -= s / (s0 * s0) - 1.0 / s;
    }
    Ok(ElboGradient { mean: g_mean, std: g_std })
}

/// Pathwise gradient of [`elbo`] with respect to the posterior mean and std.
pub fn elbo_gradient(
    model: &BayesClassifier,
    q: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
) -> Result<ElboGradient> {
    let eps = draw_noise(cfg.seed, cfg.mc_samples, q.dim());
    elbo_gradient_with_noise(model, q, prior, batch, &eps)
}

/// Draws a minibatch of `min(batch_size, N)` distinct samples, rescaled to N.
pub fn sample_batch<'a>(data: &'a Dataset, cfg: &TrainConfig) -> Batch<'a> {
    let mut rng: SimRng = SimRng::seed_from_u64(rng::derive_seed(cfg.seed, &[BATCH_STREAM]));
    let n = data.len();
    let size = cfg.batch_size.min(n);
    let mut idx = index::sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    Batch::from_indices(data, &idx, n as f64)
}

/// One SGD ascent step on the ELBO. `data = None` leaves only the KL term.
pub fn local_train_step(
    model: &BayesClassifier,
    q: &DiagonalGaussian,
    prior: &DiagonalGaussian,
    data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<DiagonalGaussian> {
    let batch = match data {
        Some(d) => sample_batch(d, cfg),
        None => Batch::empty(),
    };
    let grad = elbo_gradient(model, q, prior, &batch, cfg)?;
    let eta = cfg.learning_rate;
    let mean = q.mean().iter().zip(&grad.mean).map(|(m, g)| m + eta * g).collect();
    let std = q
        .std()
        .iter()
        .zip(&grad.std)
        .map(|(s, g)| (s + eta * g).max(cfg.sigma_min))
        .collect();
    DiagonalGaussian::new(mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn toy_data(seed: u64, n: usize) -> Dataset {
        let mut rng = rng::stream(seed, &[99]);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..n {
            let y = k % 2;
            let c = if y == 0 { -1.0 } else { 1.0 };
            xs.push(vec![c + 0.5 * rng.random::<f64>(), -c + 0.5 * rng.random::<f64>()]);
            ys.push(y);
        }
        Dataset::new(xs, ys, 2).unwrap()
    }

    fn random_gaussian(seed: u64, dim: usize, std_scale: f64) -> DiagonalGaussian {
        let mut rng = rng::stream(seed, &[7]);
        DiagonalGaussian::new(
            (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..dim).map(|_| std_scale * rng.random_range(0.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn kl_only_when_q_equals_prior() {
        let model = BayesClassifier::new(2, 2);
        let q = random_gaussian(1, model.dims(), 0.3);
        let data = toy_data(3, 10);
        let batch = Batch::full(&data);
        let cfg = TrainConfig { mc_samples: 3, seed: 11, ..Default::default() };
        let eps = draw_noise(cfg.seed, 3, q.dim());
        let mut ll = 0.0;
        for e in &eps {
            let w = sample_weights(&q, e);
            ll += super::super::classifier::log_likelihood(&model, &w, &batch).unwrap();
        }
        let ll = ll / 3.0;
        assert_relative_eq!(elbo(&model, &q, &q, &batch, &cfg).unwrap(), ll, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_reduces_to_mean_likelihood() {
        let model = BayesClassifier::new(2, 2);
        let q = random_gaussian(2, model.dims(), 0.3);
        let prior = random_gaussian(5, model.dims(), 0.5);
        let data = toy_data(4, 6);
        let batch = Batch::full(&data);
        let got = elbo_with_noise(&model, &q, &prior, &batch, &[vec![0.0; q.dim()]]).unwrap();
        let want = super::super::classifier::log_likelihood(&model, q.mean(), &batch).unwrap()
            - kl_diag_gaussian(&q, &prior).unwrap();
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn replay_oracle_with_three_samples() {
        let model = BayesClassifier::new(2, 2);
        let q = random_gaussian(8, model.dims(), 0.2);
        let prior = random_gaussian(9, model.dims(), 0.4);
        let data = toy_data(10, 8);
        let batch = Batch::from_indices(&data, &[0, 3, 5], 8.0);
        let cfg = TrainConfig { mc_samples: 3, seed: 1234, ..Default::default() };
        // Replay: regenerate the same noise stream and recompute by hand.
        let eps = draw_noise(1234, 3, q.dim());
        let mut total = 0.0;
        for e in &eps {
            let w: Vec<f64> = (0..q.dim()).map(|z| q.mean()[z] + q.std()[z] * e[z]).collect();
            for &n in &[0usize, 3, 5] {
                let (x, y) = (data.input(n), data.label(n));
                let logits: Vec<f64> = (0..2).map(|c| w[c * 3] * x[0] + w[c * 3 + 1] * x[1] + w[c * 3 + 2]).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                total += (8.0 / 3.0) * (logits[y].exp() / z).ln();
            }
        }
        let want = total / 3.0 - kl_diag_gaussian(&q, &prior).unwrap();
        assert_relative_eq!(elbo(&model, &q, &prior, &batch, &cfg).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn pure_kl_gradient() {
        let model = BayesClassifier::new(1, 1);
        let q = DiagonalGaussian::new(vec![0.7, -0.2], vec![1.0, 1.0]).unwrap();
        let prior = DiagonalGaussian::isotropic(2, 0.0, 1.0).unwrap();
        let g = elbo_gradient(&model, &q, &prior, &Batch::empty(), &TrainConfig::default()).unwrap();
        assert_relative_eq!(g.mean[0], -0.7, epsilon = 1e-12);
        assert_relative_eq!(g.mean[1], 0.2, epsilon = 1e-12);

        // d KL / d sigma at q = N(0, s), prior = N(0, 1) is s - 1/s.
        let s = 0.4;
        let q = DiagonalGaussian::new(vec![0.0, 0.0], vec![s, s]).unwrap();
        let g = elbo_gradient(&model, &q, &prior, &Batch::empty(), &TrainConfig::default()).unwrap();
        assert_relative_eq!(-g.std[0], s - 1.0 / s, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = BayesClassifier::new(2, 3);
        for seed in 0..10u64 {
            let q = random_gaussian(seed, model.dims(), 0.3);
            let prior = random_gaussian(seed + 100, model.dims(), 0.5);
            let data = toy_data(seed, 12);
            let batch = Batch::from_indices(&data, &[0, 1, 4, 7, 9], 12.0);
            let cfg = TrainConfig { mc_samples: 3, seed: seed * 31 + 7, ..Default::default() };
            let g = elbo_gradient(&model, &q, &prior, &batch, &cfg).unwrap();
            let h = 1e-5;
            for z in 0..q.dim() {
                for which in 0..2 {
                    let bump = |d: f64| {
                        let mut m = q.mean().to_vec();
                        let mut s = q.std().to_vec();
                        if which == 0 { m[z] += d } else { s[z] += d }
                        elbo(&model, &DiagonalGaussian::new(m, s).unwrap(), &prior, &batch, &cfg).unwrap()
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = if which == 0 { g.mean[z] } else { g.std[z] };
                    let rel = (fd - an).abs() / an.abs().max(1e-3);
                    assert!(rel < 1e-4, "seed {seed} z {z} which {which}: fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let model = BayesClassifier::new(2, 2);
        let q = random_gaussian(3, model.dims(), 0.1);
        let data = toy_data(3, 20);
        let cfg = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert_eq!(local_train_step(&model, &q, &q, Some(&data), &cfg).unwrap(), q);
    }

    #[test]
    fn pure_kl_step() {
        let model = BayesClassifier::new(0, 1);
        let q = DiagonalGaussian::new(vec![1.0], vec![1.0]).unwrap();
        let prior = DiagonalGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let next = local_train_step(&model, &q, &prior, None, &cfg).unwrap();
        assert_relative_eq!(next.mean()[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(next.std()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn std_is_clamped() {
        let model = BayesClassifier::new(0, 1);
        let q = DiagonalGaussian::new(vec![0.0], vec![0.5]).unwrap();
        let prior = DiagonalGaussian::new(vec![0.0], vec![0.01]).unwrap();
        let cfg = TrainConfig { learning_rate: 10.0, ..Default::default() };
        let next = local_train_step(&model, &q, &prior, None, &cfg).unwrap();
        assert_eq!(next.std()[0], SIGMA_MIN);
    }

    #[test]
    fn small_steps_increase_the_elbo() {
        let model = BayesClassifier::new(2, 2);
        let data = toy_data(42, 40);
        let prior = DiagonalGaussian::isotropic(model.dims(), 0.0, 0.5).unwrap();
        let mut improved = 0;
        for seed in 0..20u64 {
            let q = random_gaussian(seed, model.dims(), 0.2);
            let cfg = TrainConfig { learning_rate: 1e-4, batch_size: 40, mc_samples: 3, seed, ..Default::default() };
            let batch = Batch::full(&data);
            let before = elbo(&model, &q, &prior, &batch, &cfg).unwrap();
            let next = local_train_step(&model, &q, &prior, Some(&data), &cfg).unwrap();
            let after = elbo(&model, &next, &prior, &batch, &cfg).unwrap();
            if after >= before {
                improved += 1;
            }
        }
        assert_eq!(improved, 20);
    }
}
