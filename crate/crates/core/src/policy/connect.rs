//! The request/accept protocol that turns connection probabilities into a
//! topology with a feasible power allocation.

use std::collections::BTreeSet;

use rand::Rng;

use super::network::RequestRecord;
use crate::error::{Error, Result};
use crate::threat::ConnectionMatrix;
use crate::wireless::{channel_gain, power_feasible, power_for_delay, tx_delay, ChannelState, Geometry, LinkBudget};

/// Relative slack when comparing tied probabilities.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestMode {
    /// Request the most probable remaining neighbor; ties are broken at random.
    Argmax,
    /// Sample from the probabilities renormalized over the remaining neighbors.
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionOutcome {
    pub links: ConnectionMatrix,
    /// `power[j][i]`: transmit power j uses towards i.
    pub power: Vec<Vec<f64>>,
    /// Every request each device made, in order.
    pub requests: Vec<Vec<RequestRecord>>,
}

impl ConnectionOutcome {
    pub fn total_power(&self) -> f64 {
        self.power.iter().flatten().sum()
    }
}

/// `gains[j][i]` for the link j -> i; zero on the diagonal.
pub fn gain_matrix(geometry: &Geometry, channel: &ChannelState) -> Result<Vec<Vec<f64>>> {
    let n = geometry.len();
    let mut g = vec![vec![0.0; n]; n];
    for j in 0..n {
        for i in 0..n {
            if i != j {
                g[j][i] = channel_gain(j, i, geometry, channel)?;
            }
        }
    }
    Ok(g)
}

/// Powers every transmitter needs when receivers split the band among
/// their current neighbors.
pub fn allocate_powers(links: &ConnectionMatrix, gains: &[Vec<f64>], budget: &LinkBudget, channel: &ChannelState) -> Result<Vec<Vec<f64>>> {
    let n = links.len();
    let mut power = vec![vec![0.0; n]; n];
    for i in 0..n {
        let k = links.degree(i);
        for j in links.neighbors(i) {
            power[j][i] = power_for_delay(k, gains[j][i], budget, channel)?;
        }
    }
    Ok(power)
}

/// Largest delay over established links under `power`.
pub fn max_link_delay(links: &ConnectionMatrix, power: &[Vec<f64>], gains: &[Vec<f64>], channel: &ChannelState) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..links.len() {
        let k = links.degree(i);
        for j in links.neighbors(i) {
            worst = worst.max(tx_delay(k, power[j][i], gains[j][i], channel));
        }
    }
    worst
}

fn pick<R: Rng + ?Sized>(mu: &[f64], candidates: &[usize], mode: RequestMode, rng: &mut R) -> usize {
    match mode {
        RequestMode::Argmax => {
            let best = candidates.iter().map(|&k| mu[k]).fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = candidates.iter().copied().filter(|&k| mu[k] >= best - TIE_TOL * best.abs()).collect();
            ties[rng.random_range(0..ties.len())]
        }
        RequestMode::Sample => {
            let total: f64 = candidates.iter().map(|&k| mu[k]).sum();
            if !(total > 0.0) {
                return candidates[rng.random_range(0..candidates.len())];
            }
            let mut u = rng.random::<f64>() * total;
            for &k in candidates {
                u -= mu[k];
                if u < 0.0 {
                    return k;
                }
            }
            *candidates.last().expect("candidates are nonempty")
        }
    }
}

/// Runs request/accept rounds until no further link can be formed.
///
/// Each round, every device with an unused, unrefused neighbor requests one.
/// Receivers, in index order, accept the affordable incoming request with
/// the highest requester probability; affordability is checked after
/// recomputing every power with the new in-degrees. When nothing is
/// affordable the requests are refused for good.
pub fn apply_connections<R: Rng + ?Sized>(
    neighborhoods: &[Vec<usize>],
    mu: &[Vec<f64>],
    gains: &[Vec<f64>],
    budget: &LinkBudget,
    channel: &ChannelState,
    mode: RequestMode,
    rng: &mut R,
) -> Result<ConnectionOutcome> {
    let n = neighborhoods.len();
    if mu.len() != n || gains.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: mu.len(),
        });
    }
    for (i, (nb, m)) in neighborhoods.iter().zip(mu).enumerate() {
        if nb.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: nb.len(),
                actual: m.len(),
            });
        }
        if nb.iter().any(|&j| j >= n || j == i) {
            return Err(Error::Config(format!("invalid neighborhood for device {i}")));
        }
    }
    let mut links = ConnectionMatrix::empty(n);
    let mut power = vec![vec![0.0; n]; n];
    let mut refused: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut requests: Vec<Vec<RequestRecord>> = vec![Vec::new(); n];
    let key = |a: usize, b: usize| (a.min(b), a.max(b));

    loop {
        // (sender, receiver, requester probability)
        let mut round: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            let candidates: Vec<usize> = (0..neighborhoods[i].len())
                .filter(|&k| {
                    let j = neighborhoods[i][k];
                    !links.is_connected(i, j) && !refused.contains(&key(i, j))
                })
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let chosen = pick(&mu[i], &candidates, mode, rng);
            round.push((i, neighborhoods[i][chosen], mu[i][chosen]));
            requests[i].push(RequestRecord { chosen, candidates });
        }
        if round.is_empty() {
            break;
        }
        for receiver in 0..n {
            let mut incoming: Vec<(usize, f64)> = round
                .iter()
                .filter(|&&(s, r, _)| r == receiver && !links.is_connected(s, r))
                .map(|&(s, _, p)| (s, p))
                .collect();
            if incoming.is_empty() {
                continue;
            }
            incoming.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
            let mut accepted = false;
            for &(sender, _) in &incoming {
                links.connect(sender, receiver);
                let trial = allocate_powers(&links, gains, budget, channel)?;
                if trial.iter().all(|row| power_feasible(row, budget)) {
                    power = trial;
                    accepted = true;
                    break;
                }
                links.disconnect(sender, receiver);
            }
            if !accepted {
                for &(sender, _) in &incoming {
                    refused.insert(key(sender, receiver));
                }
            }
        }
    }
    Ok(ConnectionOutcome { links, power, requests })
}
