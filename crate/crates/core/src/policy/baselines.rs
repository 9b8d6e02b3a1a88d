//! Reference policies that need no training.

use super::nn::softmax;
use crate::error::Result;
use crate::spectral::{second_eigenvalue, AggregationMatrix};
use crate::threat::ConnectionMatrix;
use crate::wireless::{power_for_delay, ChannelState, LinkBudget};

/// Uniform probabilities over the neighborhood.
pub fn random_policy(neighborhood: &[usize]) -> Vec<f64> {
    let n = neighborhood.len();
    vec![1.0 / n as f64; n]
}

/// Self plus every neighbor, equal weights.
pub fn uniform_weights(links: &ConnectionMatrix) -> AggregationMatrix {
    let n = links.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let w = 1.0 / (links.degree(i) + 1) as f64;
            (0..n).map(|j| if i == j || links.is_connected(i, j) { w } else { 0.0 }).collect()
        })
        .collect();
    AggregationMatrix::from_rows(&rows).expect("uniform rows are stochastic")
}

/// Greedy spectral baseline. Each candidate link is scored by how much it
/// lowers the second eigenvalue of the uniform-weight mixing matrix of
/// `base`; the scores go through a unit-temperature softmax. Candidates
/// whose single link already exceeds the power cap get probability 0
/// unless none is affordable.
pub fn greedy_spectral_policy(
    base: &ConnectionMatrix,
    i: usize,
    neighborhood: &[usize],
    gains: &[Vec<f64>],
    budget: &LinkBudget,
    channel: &ChannelState,
) -> Result<Vec<f64>> {
    let xi0 = second_eigenvalue(&[uniform_weights(base)], 0)?;
    let mut scores = Vec::with_capacity(neighborhood.len());
    let mut affordable = Vec::with_capacity(neighborhood.len());
    for &j in neighborhood {
        let mut with = base.clone();
        with.connect(i, j);
        scores.push(xi0 - second_eigenvalue(&[uniform_weights(&with)], 0)?);
        let p_ij = power_for_delay(1, gains[i][j], budget, channel)?;
        let p_ji = power_for_delay(1, gains[j][i], budget, channel)?;
        affordable.push(p_ij <= budget.max_power && p_ji <= budget.max_power);
    }
    if !affordable.iter().any(|&a| a) {
        return Ok(softmax(&scores));
    }
    let masked: Vec<f64> = scores
        .iter()
        .zip(&affordable)
        .map(|(&s, &a)| if a { s } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax(&masked))
}
