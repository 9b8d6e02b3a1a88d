//! Device geometry, Rayleigh channel, OFDMA link delay and the per-link power
//! that meets a delay target exactly.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a noise spectral density in dBm/Hz to W/Hz.
pub fn dbm_per_hz_to_watts_per_hz(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    locations: Vec<[f64; 2]>,
    radius: f64,
}

impl Geometry {
    pub fn new(locations: Vec<[f64; 2]>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Config(format!("area radius must be positive (got {radius})")));
        }
        if let Some((i, _)) = locations
            .iter()
            .enumerate()
            .find(|(_, p)| (p[0] * p[0] + p[1] * p[1]).sqrt() > radius * (1.0 + 1e-12))
        {
            return Err(Error::Config(format!("device {i} lies outside the area of radius {radius}")));
        }
        Ok(Self { locations, radius })
    }

    /// Devices placed uniformly at random in the disk.
    pub fn uniform_disk<R: Rng + ?Sized>(devices: usize, radius: f64, rng: &mut R) -> Result<Self> {
        let locations = (0..devices)
            .map(|_| {
                let r = radius * rng.random::<f64>().sqrt();
                let theta = 2.0 * std::f64::consts::PI * rng.random::<f64>();
                [r * theta.cos(), r * theta.sin()]
            })
            .collect();
        Self::new(locations, radius)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn location(&self, i: usize) -> [f64; 2] {
        self.locations[i]
    }

    pub fn locations(&self) -> &[[f64; 2]] {
        &self.locations
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.locations[i], self.locations[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// The `k` devices closest to `i` (ties by index), excluding `i`.
    pub fn nearest(&self, i: usize, k: usize) -> Vec<usize> {
        let mut others: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            self.distance(i, a)
                .partial_cmp(&self.distance(i, b))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        others.truncate(k);
        others
    }

    /// Gaussian jitter of every location; points leaving the disk are pulled
    /// back onto its boundary.
    pub fn jitter<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        if !(std > 0.0) {
            return;
        }
        let normal = Normal::new(0.0, std).expect("positive std");
        for p in &mut self.locations {
            p[0] += normal.sample(rng);
            p[1] += normal.sample(rng);
            let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if norm > self.radius {
                p[0] *= self.radius / norm;
                p[1] *= self.radius / norm;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    /// Rayleigh fading draws, `fading[i][j]` for the link i -> j.
    pub fading: Vec<Vec<f64>>,
    /// Noise spectral density (W/Hz); multiplied by the allocated bandwidth.
    pub noise_density: f64,
    /// Total bandwidth W (Hz).
    pub bandwidth: f64,
    /// Posterior payload S (bits).
    pub payload_bits: f64,
}

impl ChannelState {
    /// Unit-scale Rayleigh fading for every ordered pair.
    pub fn draw<R: Rng + ?Sized>(
        devices: usize,
        symmetric: bool,
        noise_density: f64,
        bandwidth: f64,
        payload_bits: f64,
        rng: &mut R,
    ) -> Self {
        let mut fading = vec![vec![0.0; devices]; devices];
        for i in 0..devices {
            for j in 0..devices {
                if i == j || (symmetric && j < i) {
                    continue;
                }
                let u: f64 = rng.random();
                // inverse CDF of Rayleigh(1); 1-u keeps the log finite
                fading[i][j] = (-2.0 * (1.0 - u).ln()).sqrt();
                if symmetric {
                    fading[j][i] = fading[i][j];
                }
            }
        }
        Self {
            fading,
            noise_density,
            bandwidth,
            payload_bits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_density > 0.0 && self.bandwidth > 0.0 && self.payload_bits > 0.0) {
            return Err(Error::Config(
                "noise density, bandwidth and payload size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Per-device power cap (W).
    pub max_power: f64,
    /// Per-link delay cap Gamma (s).
    pub max_delay: f64,
}

/// h = rho_ij * d_ij^-2.
pub fn channel_gain(i: usize, j: usize, geometry: &Geometry, channel: &ChannelState) -> Result<f64> {
    let d = geometry.distance(i, j);
    if i == j || d <= 0.0 {
        return Err(Error::CoincidentLocations(i, j));
    }
    Ok(channel.fading[i][j] / (d * d))
}

/// Time to deliver the payload over a subchannel of width W/|U_i|.
pub fn tx_delay(in_degree: usize, power: f64, gain: f64, channel: &ChannelState) -> f64 {
    debug_assert!(in_degree >= 1);
    let sub_band = channel.bandwidth / in_degree as f64;
    let snr = power * gain / (sub_band * channel.noise_density);
    let rate = sub_band * snr.ln_1p() / std::f64::consts::LN_2;
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    channel.payload_bits / rate
}

/// The power at which [`tx_delay`] equals the delay cap.
pub fn power_for_delay(in_degree: usize, gain: f64, budget: &LinkBudget, channel: &ChannelState) -> Result<f64> {
    if !(gain > 0.0) {
        return Err(Error::NonPositiveGain(gain));
    }
    let k = in_degree.max(1) as f64;
    let sub_band = channel.bandwidth / k;
    let exponent = channel.payload_bits * k / (channel.bandwidth * budget.max_delay);
    // 2^x - 1 without cancellation for small x
    Ok(sub_band * channel.noise_density / gain * (exponent * std::f64::consts::LN_2).exp_m1())
}

/// Whether a device's outgoing powers fit its cap (closed constraint).
pub fn power_feasible(row: &[f64], budget: &LinkBudget) -> bool {
    row.iter().sum::<f64>() <= budget.max_power
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn channel(devices: usize, w: f64, noise: f64, s: f64) -> ChannelState {
        ChannelState {
            fading: vec![vec![1.0; devices]; devices],
            noise_density: noise,
            bandwidth: w,
            payload_bits: s,
        }
    }

    #[test]
    fn gain_is_inverse_square() {
        let ch = channel(2, 1e6, 1e-9, 1e4);
        let g = Geometry::new(vec![[0.0, 0.0], [1.0, 0.0]], 20.0).unwrap();
        assert_relative_eq!(channel_gain(0, 1, &g, &ch).unwrap(), 1.0);
        let g = Geometry::new(vec![[0.0, 0.0], [6.0, 8.0]], 20.0).unwrap();
        assert_relative_eq!(channel_gain(0, 1, &g, &ch).unwrap(), 0.01, epsilon = 1e-15);
        let g = Geometry::new(vec![[1.0, 1.0], [1.0, 1.0]], 20.0).unwrap();
        assert!(matches!(channel_gain(0, 1, &g, &ch), Err(Error::CoincidentLocations(0, 1))));
    }

    #[test]
    fn random_gain_matches_recomputation() {
        let mut r = rng::stream(3, &[]);
        let g = Geometry::uniform_disk(5, 100.0, &mut r).unwrap();
        let ch = ChannelState::draw(5, true, 1e-20, 1e6, 1e4, &mut r);
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let [xi, yi] = g.location(i);
                let [xj, yj] = g.location(j);
                let d2 = (xi - xj).powi(2) + (yi - yj).powi(2);
                let h = channel_gain(i, j, &g, &ch).unwrap();
                assert_relative_eq!(h, ch.fading[i][j] / d2, max_relative = 1e-12);
                assert!(h >= 0.0);
                assert_eq!(h, channel_gain(j, i, &g, &ch).unwrap());
            }
        }
    }

    #[test]
    fn delay_examples() {
        // p h / (W sigma^2) = 1 -> log2(2) = 1 -> l = S / W
        let ch = channel(2, 1e6, 1e-9, 1e6);
        let p = 1e6 * 1e-9;
        assert_relative_eq!(tx_delay(1, p, 1.0, &ch), 1.0, epsilon = 1e-12);
        assert_eq!(tx_delay(1, 0.0, 1.0, &ch), f64::INFINITY);
        // Same SNR per Hz with twice the in-degree: half the band, same log term.
        assert!(tx_delay(2, p / 2.0, 1.0, &ch) > tx_delay(1, p, 1.0, &ch));
    }

    #[test]
    fn power_examples() {
        let ch = channel(2, 1e6, 1e-3, 1e4);
        let budget = LinkBudget { max_power: 1.0, max_delay: 0.01 };
        let p = power_for_delay(1, 1.0, &budget, &ch).unwrap();
        // exponent S*|U|/(W*Gamma) = 1e4/(1e6*0.01) = 1 -> p = 1e6 * 1e-3 * (2 - 1)
        assert_relative_eq!(p, 1000.0, max_relative = 1e-12);
        assert_relative_eq!(tx_delay(1, p, 1.0, &ch), 0.01, max_relative = 1e-9);

        let tiny = channel(2, 1e6, 1e-3, 1e-12);
        assert!(power_for_delay(1, 1.0, &budget, &tiny).unwrap() < 1e-9);
        assert!(matches!(power_for_delay(1, 0.0, &budget, &ch), Err(Error::NonPositiveGain(_))));
    }

    #[test]
    fn round_trip_over_random_instances() {
        use rand::Rng;
        let mut r = rng::stream(11, &[]);
        for _ in 0..1000 {
            let ch = channel(2, r.random_range(1e5..1e7), 10f64.powf(r.random_range(-21.0..-15.0)), r.random_range(1e2..1e5));
            let budget = LinkBudget { max_power: 1.0, max_delay: r.random_range(1e-3..0.1) };
            let k = r.random_range(1..8usize);
            let h = 10f64.powf(r.random_range(-9.0..-3.0));
            if ch.payload_bits * k as f64 / (ch.bandwidth * budget.max_delay) > 60.0 {
                continue;
            }
            let p = power_for_delay(k, h, &budget, &ch).unwrap();
            let l = tx_delay(k, p, h, &ch);
            assert!((l - budget.max_delay).abs() / budget.max_delay < 1e-9, "{l} vs {}", budget.max_delay);
        }
    }

    #[test]
    fn delay_monotonicity() {
        let ch = channel(2, 1e6, 1e-18, 1e4);
        let mut last = f64::INFINITY;
        for p in [1e-9, 1e-8, 1e-7, 1e-6] {
            let l = tx_delay(2, p, 1e-6, &ch);
            assert!(l < last);
            last = l;
        }
        let mut big = ch.clone();
        big.payload_bits *= 2.0;
        assert!(tx_delay(2, 1e-7, 1e-6, &big) > tx_delay(2, 1e-7, 1e-6, &ch));
    }

    #[test]
    fn feasibility_boundary() {
        let b = LinkBudget { max_power: 1.0, max_delay: 0.01 };
        assert!(power_feasible(&[], &b));
        assert!(power_feasible(&[0.25, 0.75], &b));
        assert!(!power_feasible(&[0.25, 0.75 + 1e-12], &b));
    }

    #[test]
    fn noise_conversion() {
        assert_relative_eq!(dbm_per_hz_to_watts_per_hz(-174.0), 10f64.powf(-20.4), max_relative = 1e-12);
    }

    #[test]
    fn jitter_stays_inside() {
        let mut r = rng::stream(5, &[]);
        let mut g = Geometry::uniform_disk(20, 10.0, &mut r).unwrap();
        for _ in 0..50 {
            g.jitter(5.0, &mut r);
        }
        assert!(Geometry::new(g.locations().to_vec(), 10.0).is_ok());
    }
}
