//! Gradient estimation for sigmoid belief networks with Bernoulli latents.
//!
//! The central piece is a marginalized reparameterization estimator: for each
//! latent unit the objective is evaluated under both of the unit's values,
//! with all other units re-simulated from the *same* noise, and the two
//! results are weighted by the analytic gradient of the unit's probability.
//! Sharing noise between the two simulations (common random numbers) is what
//! makes the difference `f_1 - f_0` low-variance. A likelihood-ratio estimator
//! with learned baselines is provided for comparison, alongside exact
//! enumeration oracles, an RMSprop trainer and MNIST/IDX loading.

pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod grad;
pub mod math;
pub mod net;
pub mod objective;
pub mod oracle;
pub mod profile;
pub mod rng;
pub mod train;
pub mod verify;

pub use baseline::{update_baseline, BaselineModel, LearningSignals};
pub use error::{Error, Result};
pub use estimators::{estimate_lr, estimate_marginalized, inner_expectation};
pub use grad::GradientAccumulator;
pub use net::{
    clamped_forward, init_params, layer_means, log_prob_and_score, reparam_forward, Direction, LayerParams,
    ModelParams, NoiseState, SampleState, Topology, UnitAddress,
};
pub use objective::{elbo_f, grad_generative, log_p_joint, ElboObjective, FnObjective, Objective, ObjectiveValue};
