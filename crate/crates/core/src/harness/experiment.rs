//! Whole runs: evaluation with a fixed policy and offline policy training.

use super::config::{PolicyKind, SimConfig};
use super::metrics::{RoundMetrics, RunSummary};
use super::world::World;
use crate::error::Result;
use crate::policy::checkpoint::Checkpoint;
use crate::policy::network::PolicyParams;
use crate::policy::ppo::{fill_advantages, PpoTrainer, UpdateStats};
use crate::rng::{self, tag};

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub summary: RunSummary,
    /// Every H value measured on an exposed pair, in round order.
    pub h_values: Vec<f64>,
}

/// Runs `cfg.rounds` rounds. The gnn policy needs `checkpoint`.
pub fn run_experiment(cfg: &SimConfig, checkpoint: Option<&Checkpoint>) -> Result<RunOutput> {
    let policy = match (cfg.policy, checkpoint) {
        (PolicyKind::Gnn, Some(c)) => Some((c.actor.clone(), c.critic.clone())),
        _ => None,
    };
    let mut world = World::new(cfg, policy)?;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut h_values = Vec::new();
    for _ in 0..cfg.rounds {
        let out = world.run_round()?;
        h_values.extend(out.h_values);
        metrics.push(out.metrics);
    }
    let summary = RunSummary::from_metrics(cfg, &metrics, &h_values);
    Ok(RunOutput { metrics, summary, h_values })
}

#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub checkpoint: Checkpoint,
    /// Mean per-round reward of each collection episode.
    pub episode_rewards: Vec<f64>,
    pub updates: Vec<UpdateStats>,
}

/// Offline actor-critic training: each episode simulates `cfg.rounds`
/// rounds on a fresh world (its own seed), collecting samples with the
/// current actor, then applies one PPO update.
pub fn train_policy(cfg: &SimConfig, episodes: usize, start: Option<&Checkpoint>) -> Result<TrainingReport> {
    cfg.validate()?;
    let (actor, critic) = match start {
        Some(c) => (c.actor.clone(), c.critic.clone()),
        None => {
            let mut init = rng::stream(cfg.seed, &[tag::INIT, tag::PPO]);
            (PolicyParams::init(cfg.policy_dims, &mut init)?, PolicyParams::init(cfg.policy_dims, &mut init)?)
        }
    };
    let mut trainer = PpoTrainer::new(actor, critic, cfg.ppo)?;
    let mut ppo_rng = rng::stream(cfg.seed, &[tag::PPO]);
    let mut episode_rewards = Vec::with_capacity(episodes);
    let mut updates = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut ep_cfg = cfg.clone();
        ep_cfg.policy = PolicyKind::Gnn;
        ep_cfg.seed = rng::derive_seed(cfg.seed, &[tag::PPO, e as u64]);
        let mut world = World::new(&ep_cfg, Some((trainer.actor.clone(), trainer.critic.clone())))?;
        world.collect = true;
        let mut samples = Vec::with_capacity(cfg.rounds);
        let mut values = Vec::with_capacity(cfg.rounds);
        let mut total = 0.0;
        for _ in 0..cfg.rounds {
            let out = world.run_round()?;
            total += out.metrics.reward;
            if let (Some(s), Some(v)) = (out.sample, out.values) {
                samples.push(s);
                values.push(v);
            }
        }
        episode_rewards.push(total / cfg.rounds.max(1) as f64);
        fill_advantages(&mut samples, &values, cfg.ppo.gamma);
        updates.push(trainer.update(&samples, &mut ppo_rng)?);
    }
    Ok(TrainingReport {
        checkpoint: Checkpoint {
            actor: trainer.actor,
            critic: trainer.critic,
        },
        episode_rewards,
        updates,
    })
}
