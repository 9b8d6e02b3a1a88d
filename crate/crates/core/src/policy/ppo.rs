//! Rewards, advantages and the clipped policy-gradient trainer.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{self, ActionRecord, GraphInput, PolicyParams};
use crate::error::{Error, Result};

/// Positive part; the indicator convention of the reward.
fn excess(x: f64) -> f64 {
    x.max(0.0)
}

/// `-ξ - Σ (A - ϱ)⁺ - Σ (ψ - H)⁺`. Callers pass the raw differences.
pub fn reward(xi: f64, security_excess: &[f64], privacy_excess: &[f64]) -> f64 {
    -xi - security_excess.iter().map(|&x| excess(x)).sum::<f64>() - privacy_excess.iter().map(|&x| excess(x)).sum::<f64>()
}

/// One-step temporal-difference advantage.
pub fn advantage(r: f64, value: f64, next_value: f64, gamma: f64) -> f64 {
    r + gamma * next_value - value
}

pub fn ppo_clip_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// d objective / d ratio; zero where the clipped branch is selected.
pub fn ppo_clip_gradient(ratio: f64, adv: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * adv <= clipped * adv {
        adv
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    /// Rounds per minibatch.
    pub minibatch: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epochs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.9,
            minibatch: 4,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            epochs: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config("ppo.clip must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("ppo.gamma must lie in [0, 1]".into()));
        }
        if self.minibatch == 0 || self.epochs == 0 {
            return Err(Error::Config("ppo.minibatch and ppo.epochs must be positive".into()));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return Err(Error::Config("ppo learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// One collected round: the graph as the actor and critic saw it, and the
/// training devices' actions.
#[derive(Debug, Clone)]
pub struct RoundSample {
    pub input: GraphInput,
    pub critic_hidden: Vec<DVector<f64>>,
    /// `None` for devices that are not being trained.
    pub actions: Vec<Option<ActionRecord>>,
    pub old_log_probs: Vec<Option<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RoundSample {
    fn critic_input(&self) -> GraphInput {
        GraphInput {
            hidden: self.critic_hidden.clone(),
            ..self.input.clone()
        }
    }
}

/// Fills in advantages for a contiguous episode from per-round critic
/// values; the value after the last round is taken as 0.
pub fn fill_advantages(episode: &mut [RoundSample], values: &[Vec<f64>], gamma: f64) {
    for t in 0..episode.len() {
        let n = episode[t].rewards.len();
        episode[t].advantages = (0..n)
            .map(|i| {
                let next = values.get(t + 1).map_or(0.0, |v| v[i]);
                advantage(episode[t].rewards[i], values[t][i], next, gamma)
            })
            .collect();
    }
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Moves `params` along `-grad`.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) -> Result<()> {
        self.t += 1;
        let g = grad.to_flat();
        let mut x = params.to_flat();
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..x.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            x[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
        params.set_flat(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub surrogate: f64,
    pub critic_loss: f64,
    pub samples: usize,
}

/// Actor and critic with their optimizer state.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    pub actor: PolicyParams,
    pub critic: PolicyParams,
    pub cfg: PpoConfig,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl PpoTrainer {
    pub fn new(actor: PolicyParams, critic: PolicyParams, cfg: PpoConfig) -> Result<Self> {
        cfg.validate()?;
        let actor_opt = Adam::new(actor.parameter_count());
        let critic_opt = Adam::new(critic.parameter_count());
        Ok(Self {
            actor,
            critic,
            cfg,
            actor_opt,
            critic_opt,
        })
    }

    /// Clipped-surrogate ascent for the actor and squared-error descent for
    /// the critic over shuffled minibatches of rounds.
    pub fn update<R: Rng + ?Sized>(&mut self, samples: &[RoundSample], rng: &mut R) -> Result<UpdateStats> {
        if samples.is_empty() {
            return Err(Error::Empty("trajectory"));
        }
        let mut stats = UpdateStats::default();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.minibatch) {
                let s = ppo_gradients(&self.actor, &self.critic, samples, chunk, &self.cfg)?;
                self.actor_opt.step(&mut self.actor, &s.actor_grad, self.cfg.actor_lr)?;
                self.critic_opt.step(&mut self.critic, &s.critic_grad, self.cfg.critic_lr)?;
                stats = UpdateStats {
                    surrogate: s.surrogate,
                    critic_loss: s.critic_loss,
                    samples: s.count,
                };
            }
        }
        Ok(stats)
    }
}

/// Descent directions for one minibatch: the negated surrogate gradient
/// for the actor and the squared-error gradient for the critic.
pub struct MinibatchGradients {
    pub actor_grad: PolicyParams,
    pub critic_grad: PolicyParams,
    pub surrogate: f64,
    pub critic_loss: f64,
    pub count: usize,
}

/// Mean clipped surrogate and critic loss over the training devices of the
/// chosen rounds, and their gradients (as descent directions).
pub fn ppo_gradients(
    actor: &PolicyParams,
    critic: &PolicyParams,
    samples: &[RoundSample],
    chosen: &[usize],
    cfg: &PpoConfig,
) -> Result<MinibatchGradients> {
    let count: usize = chosen.iter().map(|&k| samples[k].actions.iter().filter(|a| a.is_some()).count()).sum();
    let mut out = MinibatchGradients {
        actor_grad: PolicyParams::zeros(actor.dims),
        critic_grad: PolicyParams::zeros(critic.dims),
        surrogate: 0.0,
        critic_loss: 0.0,
        count,
    };
    if count == 0 {
        return Ok(out);
    }
    let norm = 1.0 / count as f64;
    for &k in chosen {
        let s = &samples[k];
        let fwd = network::forward(actor, &s.input)?;
        let logp = network::action_log_probs(actor, &fwd, &s.actions);
        let mut weights = vec![0.0; logp.len()];
        for (i, lp) in logp.iter().enumerate() {
            let (Some(lp), Some(old)) = (lp, s.old_log_probs[i]) else { continue };
            let ratio = (lp - old).exp();
            let adv = s.advantages[i];
            out.surrogate += norm * ppo_clip_objective(ratio, adv, cfg.clip);
            // d ratio / d logp = ratio; negate for descent
            weights[i] = -norm * ppo_clip_gradient(ratio, adv, cfg.clip) * ratio;
        }
        network::action_log_prob_backward(actor, &s.input, &fwd, &s.actions, &weights, &mut out.actor_grad);

        let ci = s.critic_input();
        let cf = network::forward(critic, &ci)?;
        let v = network::values(critic, &cf);
        let mut cw = vec![0.0; v.len()];
        for (i, a) in s.actions.iter().enumerate() {
            if a.is_some() {
                let diff = v[i] - s.rewards[i];
                out.critic_loss += norm * diff * diff;
                cw[i] = 2.0 * norm * diff;
            }
        }
        network::values_backward(critic, &ci, &cf, &cw, &mut out.critic_grad);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::network::{PolicyDims, RequestRecord};
    use crate::rng;

    #[test]
    fn reward_examples() {
        assert_eq!(reward(0.0, &[], &[]), 0.0);
        assert!((reward(0.3, &[0.2], &[]) + 0.5).abs() < 1e-15);
        assert!((reward(0.0, &[], &[0.4]) + 0.4).abs() < 1e-15);
        assert_eq!(reward(0.1, &[-0.3], &[-1.0]), -0.1);
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantage(0.0, 2.0, 2.0, 1.0), 0.0);
        assert_eq!(advantage(1.0, 0.0, 0.0, 0.9), 1.0);
        assert!((advantage(0.5, 1.0, 2.0, 0.9) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(ppo_clip_objective(1.0, 0.7, 0.2), 0.7);
        assert!((ppo_clip_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        // negative advantage below the band: the clipped branch is the minimum
        assert!((ppo_clip_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(ppo_clip_gradient(1.5, 1.0, 0.2), 0.0);
        assert_eq!(ppo_clip_gradient(0.5, -1.0, 0.2), 0.0);
        assert_eq!(ppo_clip_gradient(1.5, -1.0, 0.2), -1.0);
    }

    fn toy_samples(seed: u64, dims: PolicyDims) -> (PolicyParams, PolicyParams, Vec<RoundSample>) {
        let mut r = rng::stream(seed, &[]);
        let actor = PolicyParams::init(dims, &mut r).unwrap();
        let critic = PolicyParams::init(dims, &mut r).unwrap();
        let mut samples = Vec::new();
        for _ in 0..3 {
            let input = GraphInput {
                locations: (0..3).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
                neighborhoods: vec![vec![1, 2], vec![0, 2], vec![0, 1]],
                edges: vec![vec![[0.5, 0.3], [0.5, 0.7]], vec![[0.2, 0.5], [0.8, 0.5]], vec![[1.0, 0.5], [0.0, 0.5]]],
                hidden: (0..3).map(|_| DVector::from_fn(dims.v2, |_, _| r.random_range(-0.3..0.3))).collect(),
            };
            let actions: Vec<Option<ActionRecord>> = (0..3)
                .map(|i| {
                    (i < 2).then(|| ActionRecord {
                        requests: vec![RequestRecord {
                            chosen: r.random_range(0..2),
                            candidates: vec![0, 1],
                        }],
                        features: vec![0.0, r.random_range(0.0..2.0)],
                        a_row: vec![0.6, 0.4],
                    })
                })
                .collect();
            let fwd = network::forward(&actor, &input).unwrap();
            let old: Vec<Option<f64>> = network::action_log_probs(&actor, &fwd, &actions)
                .into_iter()
                .map(|lp| lp.map(|v| v + r.random_range(-0.3..0.3)))
                .collect();
            samples.push(RoundSample {
                critic_hidden: input.hidden.clone(),
                input,
                actions,
                old_log_probs: old,
                rewards: (0..3).map(|_| r.random_range(-1.0..0.0)).collect(),
                advantages: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
            });
        }
        (actor, critic, samples)
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let dims = PolicyDims {
            v1: 3,
            v2: 3,
            k1: 2,
            k3: 1,
            slope: 0.01,
        };
        let cfg = PpoConfig::default();
        let mut worst = 0.0f64;
        for seed in 0..5 {
            let (actor, critic, samples) = toy_samples(seed, dims);
            let all = [0, 1, 2];
            let g = ppo_gradients(&actor, &critic, &samples, &all, &cfg).unwrap();
            let an = g.actor_grad.to_flat();
            let flat = actor.to_flat();
            let mut q = actor.clone();
            for k in 0..flat.len() {
                let mut f = flat.clone();
                f[k] += 1e-6;
                q.set_flat(&f).unwrap();
                let hi = ppo_gradients(&q, &critic, &samples, &all, &cfg).unwrap().surrogate;
                f[k] -= 2e-6;
                q.set_flat(&f).unwrap();
                let lo = ppo_gradients(&q, &critic, &samples, &all, &cfg).unwrap().surrogate;
                let num = -(hi - lo) / 2e-6;
                worst = worst.max((num - an[k]).abs() / num.abs().max(an[k].abs()).max(1e-4));
            }
            let cn = g.critic_grad.to_flat();
            let flat = critic.to_flat();
            let mut q = critic.clone();
            for k in 0..flat.len() {
                let mut f = flat.clone();
                f[k] += 1e-6;
                q.set_flat(&f).unwrap();
                let hi = ppo_gradients(&actor, &q, &samples, &all, &cfg).unwrap().critic_loss;
                f[k] -= 2e-6;
                q.set_flat(&f).unwrap();
                let lo = ppo_gradients(&actor, &q, &samples, &all, &cfg).unwrap().critic_loss;
                let num = (hi - lo) / 2e-6;
                worst = worst.max((num - cn[k]).abs() / num.abs().max(cn[k].abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn zero_learning_rates_leave_parameters() {
        let dims = PolicyDims {
            v1: 3,
            v2: 3,
            k1: 1,
            k3: 1,
            slope: 0.01,
        };
        let (actor, critic, samples) = toy_samples(9, dims);
        let cfg = PpoConfig {
            actor_lr: 0.0,
            critic_lr: 0.0,
            ..Default::default()
        };
        let mut t = PpoTrainer::new(actor.clone(), critic.clone(), cfg).unwrap();
        t.update(&samples, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(t.actor, actor);
        assert_eq!(t.critic, critic);
        assert!(t.update(&[], &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn update_is_deterministic() {
        let dims = PolicyDims {
            v1: 3,
            v2: 3,
            k1: 1,
            k3: 1,
            slope: 0.01,
        };
        let (actor, critic, samples) = toy_samples(4, dims);
        let run = || {
            let mut t = PpoTrainer::new(actor.clone(), critic.clone(), PpoConfig::default()).unwrap();
            t.update(&samples, &mut rng::stream(1, &[])).unwrap();
            t.actor.to_flat()
        };
        assert_eq!(run(), run());
    }

    use proptest::prelude::*;
    proptest! {
        #[test]
        fn unit_ratio_is_identity(adv in -100.0..100.0f64, eps in 0.01..0.99f64) {
            prop_assert_eq!(ppo_clip_objective(1.0, adv, eps), adv);
        }
    }
}
