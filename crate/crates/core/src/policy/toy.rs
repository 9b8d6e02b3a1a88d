//! A fixed three-device environment for checking that PPO learns.
//!
//! Devices 0 and 1 are honest and trained; device 2 is Byzantine and always
//! connects at random. Each device can afford one link, so exactly one pair
//! connects per round. The KL feature of the Byzantine is large, that of an
//! honest peer small. Flagged devices are not suppressed: keeping weight off
//! the Byzantine is left to the policy.

use nalgebra::DVector;
use rand::Rng;

use super::baselines::random_policy;
use super::connect::{apply_connections, RequestMode};
use super::network::{self, kl_feature, normalize_edges, ActionRecord, GraphInput, PolicyDims, PolicyParams};
use super::ppo::{fill_advantages, reward, PpoConfig, PpoTrainer, RoundSample};
use crate::error::Result;
use crate::rng::{self, tag};
use crate::spectral::{second_eigenvalue, AggregationMatrix};
use crate::threat::ConnectionMatrix;
use crate::wireless::{power_for_delay, ChannelState, LinkBudget};

pub const TOY_DEVICES: usize = 3;
pub const TOY_BYZANTINE: usize = 2;
const AGENTS: [usize; 2] = [0, 1];
const LOCATIONS: [[f64; 2]; 3] = [[-0.5, 0.0], [0.5, 0.0], [0.0, 0.8]];
const GAIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEnv {
    pub rounds: usize,
    pub security_tolerance: f64,
    pub privacy_threshold: f64,
}

impl Default for ToyEnv {
    fn default() -> Self {
        Self {
            rounds: 5,
            security_tolerance: 0.1,
            privacy_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ToyPolicy<'a> {
    /// Uniform connection probabilities and uniform aggregation weights.
    Random,
    /// The actor; `training` samples aggregation rows instead of using the mean.
    Learned { actor: &'a PolicyParams, critic: &'a PolicyParams, training: bool },
}

pub struct Episode {
    pub samples: Vec<RoundSample>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

fn channel() -> ChannelState {
    ChannelState {
        fading: vec![vec![1.0; TOY_DEVICES]; TOY_DEVICES],
        noise_density: 1e-20,
        bandwidth: 1e6,
        payload_bits: 1e4,
    }
}

fn budget(ch: &ChannelState) -> Result<LinkBudget> {
    let probe = LinkBudget {
        max_power: 1.0,
        max_delay: 0.01,
    };
    Ok(LinkBudget {
        max_power: 1.5 * power_for_delay(1, GAIN, &probe, ch)?,
        max_delay: 0.01,
    })
}

impl ToyEnv {
    pub fn run_episode<R: Rng + ?Sized>(&self, policy: ToyPolicy<'_>, rng: &mut R) -> Result<Episode> {
        let ch = channel();
        let budget = budget(&ch)?;
        let gains: Vec<Vec<f64>> = (0..TOY_DEVICES)
            .map(|j| (0..TOY_DEVICES).map(|i| if i == j { 0.0 } else { GAIN }).collect())
            .collect();
        let neighborhoods: Vec<Vec<usize>> = (0..TOY_DEVICES).map(|i| (0..TOY_DEVICES).filter(|&j| j != i).collect()).collect();
        let v2 = match policy {
            ToyPolicy::Learned { actor, .. } => actor.dims.v2,
            ToyPolicy::Random => 1,
        };
        let mut hidden = vec![DVector::zeros(v2); TOY_DEVICES];
        let mut critic_hidden = vec![DVector::zeros(v2); TOY_DEVICES];
        let mut prev_links = ConnectionMatrix::empty(TOY_DEVICES);
        let mut prev_a = AggregationMatrix::identity(TOY_DEVICES);
        let mut ep = Episode {
            samples: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
        };
        for _ in 0..self.rounds {
            let h: Vec<Vec<f64>> = (0..TOY_DEVICES).map(|_| (0..TOY_DEVICES).map(|_| rng.random::<f64>()).collect()).collect();
            let kl: Vec<f64> = (0..TOY_DEVICES)
                .map(|j| if j == TOY_BYZANTINE { 3.0 + rng.random::<f64>() } else { 0.3 * rng.random::<f64>() })
                .collect();
            let edges: Vec<Vec<[f64; 2]>> = (0..TOY_DEVICES)
                .map(|i| normalize_edges(&neighborhoods[i].iter().map(|&j| [h[i][j], prev_a.get(i, j)]).collect::<Vec<_>>()))
                .collect();
            let input = GraphInput {
                locations: LOCATIONS.to_vec(),
                neighborhoods: neighborhoods.clone(),
                edges,
                hidden: hidden.clone(),
            };
            let fwd = match policy {
                ToyPolicy::Learned { actor, .. } => Some(network::forward(actor, &input)?),
                ToyPolicy::Random => None,
            };
            let mu: Vec<Vec<f64>> = (0..TOY_DEVICES)
                .map(|i| match &fwd {
                    Some(f) if i != TOY_BYZANTINE => f.mu[i].clone(),
                    _ => random_policy(&neighborhoods[i]),
                })
                .collect();
            let mode = if fwd.is_some() { RequestMode::Sample } else { RequestMode::Argmax };
            let out = apply_connections(&neighborhoods, &mu, &gains, &budget, &ch, mode, rng)?;

            let mut rows = vec![vec![0.0; TOY_DEVICES]; TOY_DEVICES];
            let mut actions: Vec<Option<ActionRecord>> = vec![None; TOY_DEVICES];
            for i in 0..TOY_DEVICES {
                let support: Vec<usize> = std::iter::once(i).chain(out.links.neighbors(i)).collect();
                let features: Vec<f64> = support.iter().map(|&j| if j == i { 0.0 } else { kl_feature(kl[j]) }).collect();
                let weights = match (policy, &fwd) {
                    (ToyPolicy::Learned { actor, training, .. }, Some(f)) if AGENTS.contains(&i) => {
                        let scores = network::head_scores(actor, &f.hidden[i], &features);
                        let w = if training { network::sample_dirichlet(&scores, rng)? } else { network::aggregation_weights(actor, &f.hidden[i], &features) };
                        actions[i] = Some(ActionRecord {
                            requests: out.requests[i].clone(),
                            features,
                            a_row: w.clone(),
                        });
                        w
                    }
                    _ => vec![1.0 / support.len() as f64; support.len()],
                };
                for (&j, w) in support.iter().zip(weights) {
                    rows[i][j] = w;
                }
            }
            let a = AggregationMatrix::from_rows(&rows)?;
            let xi = second_eigenvalue(&[a.submatrix(&AGENTS)], 0)?;
            let security: Vec<f64> = AGENTS.iter().map(|&i| a.get(i, TOY_BYZANTINE) - self.security_tolerance).collect();
            let mut privacy = Vec::new();
            for &i in &AGENTS {
                for j in out.links.neighbors(i) {
                    if prev_links.is_connected(i, j) {
                        privacy.push(self.privacy_threshold - h[i][j]);
                    }
                }
            }
            let r = reward(xi, &security, &privacy);
            ep.rewards.push(r);

            if let (ToyPolicy::Learned { actor, critic, .. }, Some(f)) = (policy, fwd) {
                let ci = GraphInput {
                    hidden: critic_hidden.clone(),
                    ..input.clone()
                };
                let cf = network::forward(critic, &ci)?;
                ep.values.push(network::values(critic, &cf));
                let old = network::action_log_probs(actor, &f, &actions);
                ep.samples.push(RoundSample {
                    input,
                    critic_hidden: critic_hidden.clone(),
                    actions,
                    old_log_probs: old,
                    rewards: vec![r; TOY_DEVICES],
                    advantages: Vec::new(),
                });
                hidden = f.hidden;
                critic_hidden = cf.hidden;
            }
            prev_links = out.links;
            prev_a = a;
        }
        Ok(ep)
    }
}

/// Default network size for the toy problem.
pub fn toy_dims() -> PolicyDims {
    PolicyDims {
        v1: 8,
        v2: 8,
        k1: 2,
        k3: 2,
        slope: 0.01,
    }
}

/// Trains an actor-critic on the toy environment with one episode per update.
pub fn train_toy(env: &ToyEnv, seed: u64, updates: usize, cfg: PpoConfig) -> Result<PpoTrainer> {
    let mut init = rng::stream(seed, &[tag::INIT]);
    let actor = PolicyParams::init(toy_dims(), &mut init)?;
    let critic = PolicyParams::init(toy_dims(), &mut init)?;
    let mut trainer = PpoTrainer::new(actor, critic, cfg)?;
    let mut env_rng = rng::stream(seed, &[tag::POLICY]);
    let mut ppo_rng = rng::stream(seed, &[tag::PPO]);
    for _ in 0..updates {
        let mut ep = env.run_episode(
            ToyPolicy::Learned {
                actor: &trainer.actor,
                critic: &trainer.critic,
                training: true,
            },
            &mut env_rng,
        )?;
        fill_advantages(&mut ep.samples, &ep.values, cfg.gamma);
        trainer.update(&ep.samples, &mut ppo_rng)?;
    }
    Ok(trainer)
}

/// Mean per-round reward over `episodes` evaluation episodes.
pub fn evaluate(env: &ToyEnv, policy: ToyPolicy<'_>, seed: u64, episodes: usize) -> Result<f64> {
    let mut r = rng::stream(seed, &[tag::POLICY, 0xE7]);
    let mut total = 0.0;
    for _ in 0..episodes {
        total += env.run_episode(policy, &mut r)?.mean_reward();
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_episode_shape() {
        let env = ToyEnv::default();
        let ep = env.run_episode(ToyPolicy::Random, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(ep.rewards.len(), env.rounds);
        assert!(ep.samples.is_empty());
        assert!(ep.rewards.iter().all(|&r| r <= 0.0));
    }

    #[test]
    fn learned_episode_records_agents_only() {
        let env = ToyEnv::default();
        let mut r = rng::stream(1, &[]);
        let actor = PolicyParams::init(toy_dims(), &mut r).unwrap();
        let critic = PolicyParams::init(toy_dims(), &mut r).unwrap();
        let ep = env
            .run_episode(
                ToyPolicy::Learned {
                    actor: &actor,
                    critic: &critic,
                    training: true,
                },
                &mut r,
            )
            .unwrap();
        assert_eq!(ep.samples.len(), env.rounds);
        for s in &ep.samples {
            assert!(s.actions[0].is_some() && s.actions[1].is_some() && s.actions[2].is_none());
        }
    }
}
