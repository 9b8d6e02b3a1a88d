//! Simulation of decentralized Bayesian federated learning over a wireless
//! device-to-device network, with Byzantine detection, privacy-leakage
//! accounting, spectral convergence tracking and a graph-attention
//! recurrent policy trained by PPO.

pub mod bayes;
pub mod error;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod spectral;
pub mod threat;
pub mod wireless;

pub use error::{Error, Result};
