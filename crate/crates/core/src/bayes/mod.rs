//! Gaussian variational inference for the local learners.

mod classifier;
mod elbo;
mod gaussian;

pub use classifier::{log_likelihood, Batch, BayesClassifier, Dataset};
pub use elbo::{
    draw_noise, elbo, elbo_gradient, elbo_gradient_with_noise, elbo_with_noise, local_train_step, sample_batch,
    ElboGradient, TrainConfig, SIGMA_MIN,
};
pub use gaussian::{kl_diag_gaussian, log_pool, log_pool_uniform, prior_gap_h, DiagonalGaussian, WEIGHT_SUM_TOL};
