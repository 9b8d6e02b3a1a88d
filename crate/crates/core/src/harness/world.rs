//! Simulation state and the per-round protocol.
//!
//! Round t runs in this order:
//! 1. standard devices train from their prior; Byzantine devices draw a
//!    random posterior;
//! 2. edge features, the policy, and connection forming give U_t and p_t;
//! 3. posteriors are exchanged over U_t;
//! 4. each standard device scores its in-neighbors against the priors it can
//!    reconstruct from round t-1 (common neighbors under U_{t-1}), flags
//!    outliers, and weights the rest;
//! 5. the weighted log pool becomes the prior of round t+1;
//! 6. curious devices that received i's posterior in rounds t-1 and t
//!    reconstruct i's round-t prior and the gap H is recorded;
//! 7. metrics are assembled.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{PolicyKind, SimConfig};
use super::data::{dirichlet_partition, load_csv, synthesize_task};
use super::metrics::RoundMetrics;
use crate::bayes::{local_train_step, log_pool, prior_gap_h, BayesClassifier, Dataset, DiagonalGaussian};
use crate::error::{Error, Result};
use crate::policy::baselines::{greedy_spectral_policy, random_policy};
use crate::policy::connect::{allocate_powers, apply_connections, gain_matrix, ConnectionOutcome, RequestMode};
use crate::policy::network::{self, kl_feature, normalize_edges, ActionRecord, GraphInput, PolicyParams};
use crate::policy::ppo::{reward, RoundSample};
use crate::rng::{self, tag, SimRng};
use crate::spectral::{disagreement, second_eigenvalue, AggregationMatrix};
use crate::threat::{approximate_prior, byzantine_posterior, common_neighbors, detect_byzantine, ConnectionMatrix, DeviceRole};
use crate::wireless::{dbm_per_hz_to_watts_per_hz, tx_delay, ChannelState, Geometry, LinkBudget};

/// Relative slack for the audited delay and power constraints.
pub const AUDIT_TOLERANCE: f64 = 1e-9;
const INIT_STD: f64 = 0.1;
const PRIOR_STD: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct DeviceState {
    pub role: DeviceRole,
    /// Local shard; Byzantine devices hold none.
    pub data: Option<Dataset>,
    /// Prior held at the start of the current round.
    pub prior: DiagonalGaussian,
}

/// Everything a round produces besides the next state.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub metrics: RoundMetrics,
    /// H values on exposed (device, curious observer) pairs.
    pub h_values: Vec<f64>,
    /// Present when the world collects PPO samples.
    pub sample: Option<RoundSample>,
    pub values: Option<Vec<f64>>,
    /// Posteriors sent this round, by device.
    pub posteriors: Vec<DiagonalGaussian>,
    pub links: ConnectionMatrix,
    /// Transmit powers, `power[j][i]` for j sending to i.
    pub power: Vec<Vec<f64>>,
    pub aggregation: AggregationMatrix,
}

#[derive(Debug, Clone)]
pub struct World {
    pub cfg: SimConfig,
    pub model: BayesClassifier,
    pub devices: Vec<DeviceState>,
    pub test: Dataset,
    pub geometry: Geometry,
    pub round: usize,
    prev_links: ConnectionMatrix,
    prev_a: AggregationMatrix,
    prev_posteriors: Vec<DiagonalGaussian>,
    init: DiagonalGaussian,
    actor: Option<PolicyParams>,
    critic: Option<PolicyParams>,
    hidden: Vec<DVector<f64>>,
    critic_hidden: Vec<DVector<f64>>,
    /// Record PPO samples (implies sampled actions).
    pub collect: bool,
    /// Skip local training: every posterior equals its prior.
    pub freeze_posteriors: bool,
    /// Use this topology with uniform weights instead of the policy.
    pub fixed_links: Option<ConnectionMatrix>,
}

fn assign_roles(cfg: &SimConfig) -> Vec<DeviceRole> {
    let mut roles: Vec<DeviceRole> = std::iter::repeat_n(DeviceRole::Conventional, cfg.conventional)
        .chain(std::iter::repeat_n(DeviceRole::HonestButCurious, cfg.curious))
        .chain(std::iter::repeat_n(DeviceRole::Byzantine, cfg.byzantine))
        .collect();
    roles.shuffle(&mut rng::stream(cfg.seed, &[tag::ROLES]));
    roles
}

impl World {
    /// Builds the world for `cfg`; `policy` supplies the gnn actor and critic.
    pub fn new(cfg: &SimConfig, policy: Option<(PolicyParams, PolicyParams)>) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.devices();
        let (train, test) = match &cfg.dataset {
            Some(src) => load_csv(src)?,
            None => synthesize_task(&cfg.task, &mut rng::stream(cfg.seed, &[tag::DATA]))?,
        };
        let roles = assign_roles(cfg);
        let standard: Vec<usize> = (0..n).filter(|&i| roles[i].is_standard()).collect();
        let mut shards = dirichlet_partition(&train, standard.len(), cfg.dirichlet_concentration, &mut rng::stream(cfg.seed, &[tag::PARTITION]))?;
        let model = BayesClassifier::new(train.features(), train.classes());
        let prior = DiagonalGaussian::isotropic(model.dims(), 0.0, PRIOR_STD)?;
        let mut shard_iter = shards.drain(..);
        let devices = roles
            .iter()
            .map(|&role| DeviceState {
                role,
                data: if role.is_standard() { shard_iter.next() } else { None },
                prior: prior.clone(),
            })
            .collect();
        let mut init_rng = rng::stream(cfg.seed, &[tag::INIT]);
        let init_mean: Vec<f64> = (0..model.dims()).map(|_| INIT_STD * init_rng.sample::<f64, _>(StandardNormal)).collect();
        let init = DiagonalGaussian::new(init_mean, vec![INIT_STD; model.dims()])?;
        let geometry = Geometry::uniform_disk(n, cfg.radius_m, &mut rng::stream(cfg.seed, &[tag::GEOMETRY]))?;
        if cfg.policy == PolicyKind::Gnn && policy.is_none() {
            return Err(Error::Config("policy gnn requires a trained checkpoint".into()));
        }
        let (actor, critic) = match policy {
            Some((a, c)) => {
                if a.dims != c.dims {
                    return Err(Error::Config("actor and critic dimensions differ".into()));
                }
                (Some(a), Some(c))
            }
            None => (None, None),
        };
        let v2 = actor.as_ref().map_or(1, |a| a.dims.v2);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            devices,
            test,
            geometry,
            round: 0,
            prev_links: ConnectionMatrix::empty(n),
            prev_a: AggregationMatrix::identity(n),
            prev_posteriors: vec![init.clone(); n],
            init,
            actor,
            critic,
            hidden: vec![DVector::zeros(v2); n],
            critic_hidden: vec![DVector::zeros(v2); n],
            collect: false,
            freeze_posteriors: false,
            fixed_links: None,
        })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn roles(&self) -> Vec<DeviceRole> {
        self.devices.iter().map(|d| d.role).collect()
    }

    pub fn standard(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.devices[i].role.is_standard()).collect()
    }

    pub fn priors(&self) -> Vec<&DiagonalGaussian> {
        self.devices.iter().map(|d| &d.prior).collect()
    }

    fn budget(&self) -> LinkBudget {
        LinkBudget {
            max_power: self.cfg.wireless.max_power_w,
            max_delay: self.cfg.wireless.max_delay_s,
        }
    }

    fn local_posteriors(&self, t: usize) -> Result<Vec<DiagonalGaussian>> {
        let seed = self.cfg.seed;
        let dims = self.model.dims();
        (0..self.len())
            .map(|i| {
                let dev = &self.devices[i];
                if !dev.role.is_standard() {
                    return byzantine_posterior(dims, &mut rng::stream(seed, &[tag::BYZANTINE, t as u64, i as u64]));
                }
                if self.freeze_posteriors {
                    return Ok(dev.prior.clone());
                }
                let mut q = if t == 0 { self.init.clone() } else { dev.prior.clone() };
                for s in 0..self.cfg.local_steps {
                    let step_cfg = self.cfg.train.with_seed(rng::derive_seed(seed, &[tag::TRAIN, t as u64, i as u64, s as u64]));
                    q = local_train_step(&self.model, &q, &dev.prior, dev.data.as_ref(), &step_cfg)?;
                }
                Ok(q)
            })
            .collect()
    }

    /// i's reconstruction of j's current prior from round t-1 information.
    fn reconstruction(&self, i: usize, j: usize) -> Result<Option<DiagonalGaussian>> {
        approximate_prior(&self.prev_posteriors, &common_neighbors(&self.prev_links, i, j))
    }

    fn connect(
        &self,
        neighborhoods: &[Vec<usize>],
        gains: &[Vec<f64>],
        channel: &ChannelState,
        fwd: Option<&network::GraphForward>,
        rng_policy: &mut SimRng,
    ) -> Result<ConnectionOutcome> {
        let budget = self.budget();
        if let Some(fixed) = &self.fixed_links {
            let power = allocate_powers(fixed, gains, &budget, channel)?;
            return Ok(ConnectionOutcome {
                links: fixed.clone(),
                power,
                requests: vec![Vec::new(); self.len()],
            });
        }
        let mu: Vec<Vec<f64>> = (0..self.len())
            .map(|i| match (self.cfg.policy, fwd) {
                (PolicyKind::Gnn, Some(f)) => Ok(f.mu[i].clone()),
                (PolicyKind::Greedy, _) => greedy_spectral_policy(&self.prev_links, i, &neighborhoods[i], gains, &budget, channel),
                _ => Ok(random_policy(&neighborhoods[i])),
            })
            .collect::<Result<_>>()?;
        let mode = if fwd.is_some() && (self.collect || self.cfg.stochastic_policy) {
            RequestMode::Sample
        } else {
            RequestMode::Argmax
        };
        apply_connections(neighborhoods, &mu, gains, &budget, channel, mode, rng_policy)
    }

    fn audit(&self, out: &ConnectionOutcome, gains: &[Vec<f64>], channel: &ChannelState) -> Result<f64> {
        let budget = self.budget();
        let mut max_delay = 0.0f64;
        for i in 0..self.len() {
            let k = out.links.degree(i);
            for j in out.links.neighbors(i) {
                let delay = tx_delay(k, out.power[j][i], gains[j][i], channel);
                if !(delay <= budget.max_delay * (1.0 + AUDIT_TOLERANCE)) {
                    return Err(Error::DelayViolation {
                        from: j,
                        to: i,
                        delay,
                        max: budget.max_delay,
                    });
                }
                max_delay = max_delay.max(delay);
            }
        }
        if self.fixed_links.is_none() {
            for (j, row) in out.power.iter().enumerate() {
                let total: f64 = row.iter().sum();
                if total > budget.max_power * (1.0 + AUDIT_TOLERANCE) {
                    return Err(Error::Config(format!("device {j} exceeds its power cap: {total} W > {} W", budget.max_power)));
                }
            }
        }
        Ok(max_delay)
    }

    /// Runs one round and advances the world.
    pub fn run_round(&mut self) -> Result<RoundOutput> {
        let t = self.round;
        let n = self.len();
        let seed = self.cfg.seed;
        let roles = self.roles();
        let standard = self.standard();
        let rho = self.cfg.detector.security_tolerance;
        let psi = self.cfg.detector.privacy_threshold;

        if t > 0 && self.cfg.mobility_std_m > 0.0 {
            self.geometry.jitter(self.cfg.mobility_std_m, &mut rng::stream(seed, &[tag::MOBILITY, t as u64]));
        }
        let w = &self.cfg.wireless;
        let channel = ChannelState::draw(
            n,
            true,
            dbm_per_hz_to_watts_per_hz(w.noise_dbm_per_hz),
            w.bandwidth_hz,
            w.payload_bits,
            &mut rng::stream(seed, &[tag::FADING, t as u64]),
        );
        let gains = gain_matrix(&self.geometry, &channel)?;

        // (1) local training
        let posteriors = self.local_posteriors(t)?;

        // (2) edge features, policy, connections
        let neighborhoods: Vec<Vec<usize>> = (0..n).map(|i| self.geometry.nearest(i, self.cfg.nearest_k)).collect();
        let mut gaps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &i in &standard {
            for &j in &neighborhoods[i] {
                if let Some(pip) = self.reconstruction(i, j)? {
                    gaps[i].insert(j, prior_gap_h(&self.devices[i].prior, &pip)?);
                }
            }
        }
        let edges: Vec<Vec<[f64; 2]>> = (0..n)
            .map(|i| {
                let raw: Vec<[f64; 2]> = neighborhoods[i]
                    .iter()
                    .map(|&j| [gaps[i].get(&j).copied().unwrap_or(0.0), self.prev_a.get(i, j)])
                    .collect();
                normalize_edges(&raw)
            })
            .collect();
        let radius = self.geometry.radius();
        let input = GraphInput {
            locations: self.geometry.locations().iter().map(|p| [p[0] / radius, p[1] / radius]).collect(),
            neighborhoods: neighborhoods.clone(),
            edges,
            hidden: self.hidden.clone(),
        };
        let fwd = match (&self.actor, self.cfg.policy) {
            (Some(a), PolicyKind::Gnn) => Some(network::forward(a, &input)?),
            _ => None,
        };
        let mut policy_rng = rng::stream(seed, &[tag::POLICY, t as u64]);
        let out = self.connect(&neighborhoods, &gains, &channel, fwd.as_ref(), &mut policy_rng)?;
        let max_delay = self.audit(&out, &gains, &channel)?;

        // (3)-(4) exchange, detection, weighting
        let mut rows = vec![vec![0.0; n]; n];
        let mut actions: Vec<Option<ActionRecord>> = vec![None; n];
        let mut m = RoundMetrics {
            round: t,
            ..Default::default()
        };
        let mut round_ok = true;
        let mut observed = false;
        for i in 0..n {
            if !roles[i].is_standard() {
                rows[i][i] = 1.0;
                continue;
            }
            let mut received = BTreeMap::new();
            let mut approximations = BTreeMap::new();
            for j in out.links.neighbors(i) {
                received.insert(j, posteriors[j].clone());
                if let Some(approx) = self.reconstruction(j, i)? {
                    approximations.insert(j, approx);
                }
            }
            let det = detect_byzantine(&received, &approximations, &self.cfg.detector)?;
            let flagged = if self.cfg.detection { det.flagged.clone() } else { Default::default() };
            for j in out.links.neighbors(i) {
                let byz = roles[j] == DeviceRole::Byzantine;
                match (byz, flagged.contains(&j)) {
                    (true, true) => m.detection_tp += 1,
                    (false, true) => m.detection_fp += 1,
                    (true, false) => m.detection_fn += 1,
                    _ => {}
                }
                if byz {
                    m.byzantine_observations += 1;
                    observed = true;
                    let is_max = det.max_statistic().map(|(k, _)| k) == Some(j);
                    if is_max && flagged.contains(&j) {
                        m.byzantine_max_flagged += 1;
                    } else {
                        round_ok = false;
                    }
                }
            }
            let support: Vec<usize> = std::iter::once(i).chain(out.links.neighbors(i).filter(|j| !flagged.contains(j))).collect();
            let weights = match (&self.actor, &fwd) {
                (Some(actor), Some(f)) => {
                    let features: Vec<f64> = support.iter().map(|&j| if j == i { 0.0 } else { kl_feature(det.statistics.get(&j).copied().unwrap_or(0.0)) }).collect();
                    let scores = network::head_scores(actor, &f.hidden[i], &features);
                    let a_row = if self.collect || self.cfg.stochastic_policy {
                        network::sample_dirichlet(&scores, &mut policy_rng)?
                    } else {
                        network::aggregation_weights(actor, &f.hidden[i], &features)
                    };
                    actions[i] = Some(ActionRecord {
                        requests: out.requests[i].clone(),
                        features,
                        a_row: a_row.clone(),
                    });
                    a_row
                }
                _ => vec![1.0 / support.len() as f64; support.len()],
            };
            for (&j, wj) in support.iter().zip(weights) {
                rows[i][j] = wj;
            }
        }
        m.byzantine_round_ok = observed && round_ok;
        let a = AggregationMatrix::from_rows(&rows)?;

        // (5) log pool
        let mut new_priors = Vec::with_capacity(n);
        for i in 0..n {
            if !roles[i].is_standard() {
                new_priors.push(self.devices[i].prior.clone());
                continue;
            }
            let parts: Vec<(&DiagonalGaussian, f64)> = (0..n).filter(|&j| rows[i][j] > 0.0).map(|j| (&posteriors[j], rows[i][j])).collect();
            new_priors.push(log_pool(&parts)?);
        }

        // (6) privacy on exposed pairs
        let mut h_values = Vec::new();
        let mut privacy_excess = Vec::new();
        for &i in &standard {
            for j in out.links.neighbors(i) {
                if roles[j] != DeviceRole::HonestButCurious || !self.prev_links.is_connected(i, j) {
                    continue;
                }
                m.exposures += 1;
                if let Some(&h) = gaps[i].get(&j) {
                    h_values.push(h);
                    privacy_excess.push(psi - h);
                    if h < psi {
                        m.privacy_violations += 1;
                    }
                }
            }
        }

        // (7) metrics
        let mut security_excess = Vec::new();
        let mut byz_weights = Vec::new();
        for &i in &standard {
            for j in out.links.neighbors(i) {
                if roles[j] == DeviceRole::Byzantine {
                    let aij = rows[i][j];
                    byz_weights.push(aij);
                    security_excess.push(aij - rho);
                    if aij > rho {
                        m.security_violations += 1;
                    }
                }
            }
        }
        let accuracies: Vec<f64> = standard.iter().map(|&i| self.model.accuracy(new_priors[i].mean(), &self.test)).collect();
        m.mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        m.device_accuracy = accuracies.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
        m.xi = second_eigenvalue(&[a.submatrix(&standard)], 0)?;
        m.links = out.links.link_count();
        m.mean_degree = (0..n).map(|i| out.links.degree(i)).sum::<usize>() as f64 / n as f64;
        m.total_energy_j = out.total_power() * self.cfg.wireless.max_delay_s;
        m.max_delay_s = max_delay;
        m.byzantine_weight_mean = if byz_weights.is_empty() { 0.0 } else { byz_weights.iter().sum::<f64>() / byz_weights.len() as f64 };
        m.byzantine_weight_max = byz_weights.iter().copied().fold(0.0, f64::max);
        m.median_h = if h_values.is_empty() { f64::NAN } else { crate::threat::median(&h_values) };
        let std_priors: Vec<&DiagonalGaussian> = standard.iter().map(|&i| &new_priors[i]).collect();
        m.disagreement = disagreement(&std_priors)?;
        m.reward = reward(m.xi, &security_excess, &privacy_excess);

        let (sample, values) = match (&fwd, &self.actor, &self.critic) {
            (Some(f), Some(actor), Some(critic)) => {
                let ci = GraphInput {
                    hidden: self.critic_hidden.clone(),
                    ..input.clone()
                };
                let cf = network::forward(critic, &ci)?;
                let vals = network::values(critic, &cf);
                let sample = if self.collect {
                    let old = network::action_log_probs(actor, f, &actions);
                    Some(RoundSample {
                        input,
                        critic_hidden: self.critic_hidden.clone(),
                        actions,
                        old_log_probs: old,
                        rewards: vec![m.reward; n],
                        advantages: Vec::new(),
                    })
                } else {
                    None
                };
                self.hidden = f.hidden.clone();
                self.critic_hidden = cf.hidden;
                (sample, Some(vals))
            }
            _ => (None, None),
        };

        for (dev, p) in self.devices.iter_mut().zip(new_priors) {
            dev.prior = p;
        }
        self.prev_links = out.links.clone();
        self.prev_a = a.clone();
        self.prev_posteriors = posteriors.clone();
        self.round += 1;
        Ok(RoundOutput {
            metrics: m,
            h_values,
            sample,
            values,
            posteriors,
            links: out.links,
            power: out.power,
            aggregation: a,
        })
    }
}
