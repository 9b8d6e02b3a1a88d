//! Neighbor-selection policies and their training.

pub mod baselines;
pub mod checkpoint;
pub mod connect;
pub mod network;
pub mod nn;
pub mod ppo;
pub mod toy;
