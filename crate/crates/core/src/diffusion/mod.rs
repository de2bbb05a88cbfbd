//! Conditional denoising diffusion in `R^d`: schedule, noising, the
//! epsilon-predictor with exact gradients, ancestral sampling and ELBO
//! estimation.

pub mod elbo;
pub mod gaussian;
pub mod kernel;
pub mod network;
pub mod sampler;
pub mod schedule;

pub use elbo::{elbo_neg_mse, elbo_neg_mse_with_draws, ExactNoiseOracle};
pub use gaussian::LinearPredictor;
pub use kernel::{
    drawn_loss_and_grad, loss_and_grad, loss_and_grad_normalized, DrawnExample, NoiseDraw,
    TimestepWeighting, WeightedExample,
};
pub use network::{
    time_embedding, Architecture, Condition, ModelParams, NoisePredictor, ParametricPredictor,
};
pub use sampler::{sample, Sample};
pub use schedule::{build_schedule, NoiseSchedule};
