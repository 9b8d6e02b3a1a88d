//! The GAT + GRU actor-critic over a round's device graph.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use super::nn::{self, GatPair, GruWeights};
use crate::error::{Error, Result};

/// Location (2) plus normalized edge feature (2).
pub const GAT1_INPUT: usize = 4;
/// Smallest entry allowed in a sampled aggregation row.
pub const DIRICHLET_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDims {
    pub v1: usize,
    pub v2: usize,
    pub k1: usize,
    pub k3: usize,
    pub slope: f64,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            v1: 16,
            v2: 16,
            k1: 2,
            k3: 2,
            slope: 0.01,
        }
    }
}

impl PolicyDims {
    pub fn validate(&self) -> Result<()> {
        if self.v1 == 0 || self.v2 == 0 || self.k1 == 0 || self.k3 == 0 {
            return Err(Error::Config("policy dims and head counts must be positive".into()));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Weights of one network. The actor and the critic each own one; the
/// critic reads its head as a linear value map over `[h ; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub dims: PolicyDims,
    pub gat1_w: Vec<DMatrix<f64>>,
    pub gat1_att: Vec<DMatrix<f64>>,
    pub fc2: DMatrix<f64>,
    pub gat3_w: Vec<DMatrix<f64>>,
    pub gat3_att: Vec<DMatrix<f64>>,
    pub fc4: DMatrix<f64>,
    pub gru: GruWeights,
    pub head: DMatrix<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let PolicyDims { v1, v2, k1, k3, .. } = dims;
        Self {
            dims,
            gat1_w: vec![DMatrix::zeros(v1, GAT1_INPUT); k1],
            gat1_att: vec![DMatrix::zeros(1, 2 * v1); k1],
            fc2: DMatrix::zeros(v1, v1),
            gat3_w: vec![DMatrix::zeros(v2, v1); k3],
            gat3_att: vec![DMatrix::zeros(1, 2 * v2); k3],
            fc4: DMatrix::zeros(v2, v2),
            gru: GruWeights::zeros(v2),
            head: DMatrix::zeros(1, v2 + 1),
        }
    }

    /// Normal entries with std 1/sqrt(fan-in).
    pub fn init<R: Rng + ?Sized>(dims: PolicyDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        for t in p.tensors_mut() {
            let std = 1.0 / (t.ncols() as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            t.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        Ok(p)
    }

    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut v: Vec<&DMatrix<f64>> = Vec::new();
        v.extend(self.gat1_w.iter());
        v.extend(self.gat1_att.iter());
        v.push(&self.fc2);
        v.extend(self.gat3_w.iter());
        v.extend(self.gat3_att.iter());
        v.push(&self.fc4);
        let g = &self.gru;
        v.extend([&g.we1, &g.we2, &g.wr1, &g.wr2, &g.wa, &g.u]);
        v.push(&self.head);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut v: Vec<&mut DMatrix<f64>> = Vec::new();
        v.extend(self.gat1_w.iter_mut());
        v.extend(self.gat1_att.iter_mut());
        v.push(&mut self.fc2);
        v.extend(self.gat3_w.iter_mut());
        v.extend(self.gat3_att.iter_mut());
        v.push(&mut self.fc4);
        let g = &mut self.gru;
        v.extend([&mut g.we1, &mut g.we2, &mut g.wr1, &mut g.wr2, &mut g.wa, &mut g.u]);
        v.push(&mut self.head);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                actual: flat.len(),
            });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b * scale;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Componentwise normalization of a neighborhood's edge features; a
/// component that sums to zero becomes uniform.
pub fn normalize_edges(features: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = features.len() as f64;
    let sums = features.iter().fold([0.0, 0.0], |acc, f| [acc[0] + f[0], acc[1] + f[1]]);
    features
        .iter()
        .map(|f| {
            let mut out = [0.0; 2];
            for c in 0..2 {
                out[c] = if sums[c] > 0.0 { f[c] / sums[c] } else { 1.0 / n };
            }
            out
        })
        .collect()
}

/// What the network sees in one round, for every device.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    /// Locations divided by the area radius.
    pub locations: Vec<[f64; 2]>,
    /// First-hop neighborhoods (k nearest devices).
    pub neighborhoods: Vec<Vec<usize>>,
    /// Normalized edge features aligned with `neighborhoods`.
    pub edges: Vec<Vec<[f64; 2]>>,
    /// Recurrent state carried from the previous round.
    pub hidden: Vec<DVector<f64>>,
}

impl GraphInput {
    pub fn devices(&self) -> usize {
        self.locations.len()
    }

    fn validate(&self, v2: usize) -> Result<()> {
        let n = self.locations.len();
        for (i, nb) in self.neighborhoods.iter().enumerate() {
            if self.edges[i].len() != nb.len() || nb.iter().any(|&j| j >= n || j == i) {
                return Err(Error::Config(format!("malformed neighborhood for device {i}")));
            }
        }
        if self.neighborhoods.len() != n || self.edges.len() != n || self.hidden.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: self.hidden.len(),
            });
        }
        if let Some(h) = self.hidden.iter().find(|h| h.len() != v2) {
            return Err(Error::DimensionMismatch {
                expected: v2,
                actual: h.len(),
            });
        }
        Ok(())
    }

    fn layer1_pairs(&self, i: usize) -> Vec<GatPair> {
        let loc = |k: usize| self.locations[k];
        let nb = &self.neighborhoods[i];
        if nb.is_empty() {
            let v = DVector::from_vec(vec![loc(i)[0], loc(i)[1], 1.0, 1.0]);
            return vec![(v.clone(), v)];
        }
        nb.iter()
            .zip(&self.edges[i])
            .map(|(&j, e)| {
                let c = DVector::from_vec(vec![loc(i)[0], loc(i)[1], e[0], e[1]]);
                let d = DVector::from_vec(vec![loc(j)[0], loc(j)[1], e[0], e[1]]);
                (c, d)
            })
            .collect()
    }
}

/// Cached activations of a full-graph forward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pairs1: Vec<Vec<GatPair>>,
    cache1: Vec<nn::GatCache>,
    q1: Vec<DVector<f64>>,
    pre2: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pairs3: Vec<Vec<GatPair>>,
    cache3: Vec<nn::GatCache>,
    q3: Vec<DVector<f64>>,
    pre4: Vec<DVector<f64>>,
    pub z_prime: Vec<DVector<f64>>,
    gru_cache: Vec<nn::GruCache>,
    /// Updated recurrent state.
    pub hidden: Vec<DVector<f64>>,
    /// `⟨z'_i, z'_j⟩` for j in the neighborhood of i.
    pub logits: Vec<Vec<f64>>,
    /// Connection probabilities over each neighborhood.
    pub mu: Vec<Vec<f64>>,
}

fn layer3_pairs(z: &[DVector<f64>], nb: &[usize], i: usize) -> Vec<GatPair> {
    if nb.is_empty() {
        return vec![(z[i].clone(), z[i].clone())];
    }
    nb.iter().map(|&j| (z[i].clone(), z[j].clone())).collect()
}

pub fn forward(p: &PolicyParams, input: &GraphInput) -> Result<GraphForward> {
    input.validate(p.dims.v2)?;
    let slope = p.dims.slope;
    let n = input.devices();
    let mut out = GraphForward {
        pairs1: Vec::with_capacity(n),
        cache1: Vec::with_capacity(n),
        q1: Vec::with_capacity(n),
        pre2: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        pairs3: Vec::with_capacity(n),
        cache3: Vec::with_capacity(n),
        q3: Vec::with_capacity(n),
        pre4: Vec::with_capacity(n),
        z_prime: Vec::with_capacity(n),
        gru_cache: Vec::with_capacity(n),
        hidden: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
    };
    for i in 0..n {
        let pairs = input.layer1_pairs(i);
        let (q, cache) = nn::gat_forward(&p.gat1_w, &p.gat1_att, &pairs, slope)?;
        let (z, pre) = nn::fc_forward(&p.fc2, &q, slope)?;
        out.pairs1.push(pairs);
        out.cache1.push(cache);
        out.q1.push(q);
        out.pre2.push(pre);
        out.z.push(z);
    }
    for i in 0..n {
        let pairs = layer3_pairs(&out.z, &input.neighborhoods[i], i);
        let (q, cache) = nn::gat_forward(&p.gat3_w, &p.gat3_att, &pairs, slope)?;
        let (zp, pre) = nn::fc_forward(&p.fc4, &q, slope)?;
        out.pairs3.push(pairs);
        out.cache3.push(cache);
        out.q3.push(q);
        out.pre4.push(pre);
        out.z_prime.push(zp);
    }
    for i in 0..n {
        let (h, cache) = nn::gru_step(&p.gru, &out.z_prime[i], &input.hidden[i])?;
        out.hidden.push(h);
        out.gru_cache.push(cache);
        let logits: Vec<f64> = input.neighborhoods[i].iter().map(|&j| out.z_prime[i].dot(&out.z_prime[j])).collect();
        out.mu.push(nn::softmax(&logits));
        out.logits.push(logits);
    }
    Ok(out)
}

/// Upstream gradients for a backward pass.
#[derive(Debug, Clone)]
pub struct GraphGrad {
    /// Per device, w.r.t. each connection logit.
    pub logits: Vec<Vec<f64>>,
    /// Per device, w.r.t. the updated hidden state.
    pub hidden: Vec<DVector<f64>>,
}

impl GraphGrad {
    pub fn zeros(fwd: &GraphForward) -> Self {
        Self {
            logits: fwd.logits.iter().map(|l| vec![0.0; l.len()]).collect(),
            hidden: fwd.hidden.iter().map(|h| DVector::zeros(h.len())).collect(),
        }
    }
}

/// Parameter gradient. The previous hidden state is treated as a constant.
pub fn backward(p: &PolicyParams, input: &GraphInput, fwd: &GraphForward, up: &GraphGrad, grad: &mut PolicyParams) {
    let slope = p.dims.slope;
    let n = input.devices();
    let mut dzp: Vec<DVector<f64>> = fwd.z_prime.iter().map(|z| DVector::zeros(z.len())).collect();
    for i in 0..n {
        for (k, &j) in input.neighborhoods[i].iter().enumerate() {
            let g = up.logits[i][k];
            if g != 0.0 {
                dzp[i] += &fwd.z_prime[j] * g;
                dzp[j] += &fwd.z_prime[i] * g;
            }
        }
    }
    for i in 0..n {
        if up.hidden[i].iter().any(|&x| x != 0.0) {
            let g = nn::gru_backward(&p.gru, &fwd.z_prime[i], &input.hidden[i], &fwd.gru_cache[i], &up.hidden[i]);
            let gw = &mut grad.gru;
            gw.we1 += g.weights.we1;
            gw.we2 += g.weights.we2;
            gw.wr1 += g.weights.wr1;
            gw.wr2 += g.weights.wr2;
            gw.wa += g.weights.wa;
            gw.u += g.weights.u;
            dzp[i] += g.z;
        }
    }
    let mut dz: Vec<DVector<f64>> = fwd.z.iter().map(|z| DVector::zeros(z.len())).collect();
    for i in 0..n {
        let (dw4, dq3) = nn::fc_backward(&p.fc4, &fwd.q3[i], &fwd.pre4[i], &dzp[i], slope);
        grad.fc4 += dw4;
        let g = nn::gat_backward(&p.gat3_w, &p.gat3_att, &fwd.pairs3[i], &fwd.cache3[i], &dq3, slope);
        for k in 0..g.w.len() {
            grad.gat3_w[k] += &g.w[k];
            grad.gat3_att[k] += &g.att[k];
        }
        let nb = &input.neighborhoods[i];
        for (m, (dc, dd)) in g.c.iter().zip(&g.d).enumerate() {
            dz[i] += dc;
            let j = if nb.is_empty() { i } else { nb[m] };
            dz[j] += dd;
        }
    }
    for i in 0..n {
        let (dw2, dq1) = nn::fc_backward(&p.fc2, &fwd.q1[i], &fwd.pre2[i], &dz[i], slope);
        grad.fc2 += dw2;
        let g = nn::gat_backward(&p.gat1_w, &p.gat1_att, &fwd.pairs1[i], &fwd.cache1[i], &dq1, slope);
        for k in 0..g.w.len() {
            grad.gat1_w[k] += &g.w[k];
            grad.gat1_att[k] += &g.att[k];
        }
    }
}

/// Connection probabilities: softmax of `⟨z'_i, z'_j⟩` over the neighborhood.
pub fn connection_probs(z_prime: &[DVector<f64>], i: usize, neighborhood: &[usize]) -> Vec<f64> {
    let logits: Vec<f64> = neighborhood.iter().map(|&j| z_prime[i].dot(&z_prime[j])).collect();
    nn::softmax(&logits)
}

/// Feature fed to the aggregation head for a received KL statistic.
pub fn kl_feature(kl: f64) -> f64 {
    kl.max(0.0).ln_1p()
}

fn head_weights(p: &PolicyParams) -> DVector<f64> {
    DVector::from_iterator(p.dims.v2, p.head.iter().take(p.dims.v2).copied())
}

/// Head scores `lrelu(W · [h ; f_j])` over the aggregation support.
pub fn head_scores(p: &PolicyParams, h: &DVector<f64>, features: &[f64]) -> Vec<f64> {
    let v2 = p.dims.v2;
    let base: f64 = head_weights(p).dot(h);
    let wf = p.head[(0, v2)];
    features.iter().map(|&f| nn::lrelu(base + wf * f, p.dims.slope)).collect()
}

fn head_backward(p: &PolicyParams, h: &DVector<f64>, features: &[f64], dscores: &[f64], grad: &mut PolicyParams, dh: &mut DVector<f64>) {
    let v2 = p.dims.v2;
    let base: f64 = head_weights(p).dot(h);
    let wf = p.head[(0, v2)];
    for (&f, &ds) in features.iter().zip(dscores) {
        let dpre = ds * nn::lrelu_grad(base + wf * f, p.dims.slope);
        if dpre == 0.0 {
            continue;
        }
        {
            let mut g = grad.head.columns_mut(0, v2);
            g += h.transpose() * dpre;
        }
        grad.head[(0, v2)] += dpre * f;
        *dh += head_weights(p) * dpre;
    }
}

/// Aggregation weights over the support (self first by convention of the
/// caller): softmax of the head scores.
pub fn aggregation_weights(p: &PolicyParams, h: &DVector<f64>, features: &[f64]) -> Vec<f64> {
    nn::softmax(&head_scores(p, h, features))
}

/// Log density of `x` under Dirichlet(exp(scores)). A single-entry support
/// is a point mass with log density 0.
pub fn dirichlet_log_density(scores: &[f64], x: &[f64]) -> f64 {
    if scores.len() <= 1 {
        return 0.0;
    }
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let total: f64 = alpha.iter().sum();
    ln_gamma(total) + alpha.iter().zip(x).map(|(&a, &xi)| (a - 1.0) * xi.ln() - ln_gamma(a)).sum::<f64>()
}

/// Gradient of [`dirichlet_log_density`] w.r.t. the scores.
pub fn dirichlet_log_density_grad(scores: &[f64], x: &[f64]) -> Vec<f64> {
    if scores.len() <= 1 {
        return vec![0.0; scores.len()];
    }
    let alpha: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let total: f64 = alpha.iter().sum();
    let dg = digamma(total);
    alpha.iter().zip(x).map(|(&a, &xi)| a * (dg - digamma(a) + xi.ln())).collect()
}

/// Draws from Dirichlet(exp(scores)) via normalized gamma variates,
/// flooring entries away from zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if scores.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut g = Vec::with_capacity(scores.len());
    for s in scores {
        let gamma = rand_distr::Gamma::new(s.exp(), 1.0).map_err(|e| Error::Config(e.to_string()))?;
        g.push(gamma.sample(rng).max(DIRICHLET_FLOOR));
    }
    let total: f64 = g.iter().sum();
    let mut x: Vec<f64> = g.iter().map(|v| (v / total).max(DIRICHLET_FLOOR)).collect();
    let total: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= total);
    Ok(x)
}

/// One connection request: the chosen index into the neighborhood and the
/// indices that were still available when it was drawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub chosen: usize,
    pub candidates: Vec<usize>,
}

/// Everything needed to re-evaluate one device's action log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub requests: Vec<RequestRecord>,
    /// Head features over the aggregation support, aligned with `a_row`.
    pub features: Vec<f64>,
    /// The sampled aggregation weights over the support.
    pub a_row: Vec<f64>,
}

/// log-probability of a request drawn from the logits restricted to its candidates.
fn request_log_prob(logits: &[f64], req: &RequestRecord) -> f64 {
    let sub: Vec<f64> = req.candidates.iter().map(|&k| logits[k]).collect();
    logits[req.chosen] - nn::log_sum_exp(&sub)
}

/// Log-probability of each device's recorded action under `fwd`.
pub fn action_log_probs(p: &PolicyParams, fwd: &GraphForward, actions: &[Option<ActionRecord>]) -> Vec<Option<f64>> {
    actions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            a.as_ref().map(|a| {
                let req: f64 = a.requests.iter().map(|r| request_log_prob(&fwd.logits[i], r)).sum();
                let scores = head_scores(p, &fwd.hidden[i], &a.features);
                req + dirichlet_log_density(&scores, &a.a_row)
            })
        })
        .collect()
}

/// Gradient of `Σ_i weight_i · log π(action_i)`, accumulated into `grad`.
pub fn action_log_prob_backward(
    p: &PolicyParams,
    input: &GraphInput,
    fwd: &GraphForward,
    actions: &[Option<ActionRecord>],
    weights: &[f64],
    grad: &mut PolicyParams,
) {
    let mut up = GraphGrad::zeros(fwd);
    for (i, a) in actions.iter().enumerate() {
        let Some(a) = a else { continue };
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for r in &a.requests {
            let sub: Vec<f64> = r.candidates.iter().map(|&k| fwd.logits[i][k]).collect();
            let probs = nn::softmax(&sub);
            up.logits[i][r.chosen] += w;
            for (&k, pk) in r.candidates.iter().zip(probs) {
                up.logits[i][k] -= w * pk;
            }
        }
        let scores = head_scores(p, &fwd.hidden[i], &a.features);
        let ds: Vec<f64> = dirichlet_log_density_grad(&scores, &a.a_row).iter().map(|g| g * w).collect();
        let mut dh = DVector::zeros(p.dims.v2);
        head_backward(p, &fwd.hidden[i], &a.features, &ds, grad, &mut dh);
        up.hidden[i] += dh;
    }
    backward(p, input, fwd, &up, grad);
}

/// Critic value of each device: `W · [h ; 1]`.
pub fn values(critic: &PolicyParams, fwd: &GraphForward) -> Vec<f64> {
    let v2 = critic.dims.v2;
    fwd.hidden
        .iter()
        .map(|h| head_weights(critic).dot(h) + critic.head[(0, v2)])
        .collect()
}

/// Gradient of `Σ_i weight_i · V_i`, accumulated into `grad`.
pub fn values_backward(critic: &PolicyParams, input: &GraphInput, fwd: &GraphForward, weights: &[f64], grad: &mut PolicyParams) {
    let v2 = critic.dims.v2;
    let mut up = GraphGrad::zeros(fwd);
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        {
            let mut g = grad.head.columns_mut(0, v2);
            g += fwd.hidden[i].transpose() * w;
        }
        grad.head[(0, v2)] += w;
        up.hidden[i] = head_weights(critic) * w;
    }
    backward(critic, input, fwd, &up, grad);
}
