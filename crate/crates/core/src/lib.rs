pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod reward;
pub mod scalar;
pub mod seed;
pub mod theory;
pub mod trainer;

pub use error::{CraftError, Result};
pub use scalar::Scalar;

pub type Model = diffusion::ModelParams<f64>;
pub type Schedule = diffusion::NoiseSchedule<f64>;
pub type Rewards = reward::RewardVector<f64>;
pub type Scaler = reward::RewardScaler<f64>;
pub type Weights = reward::CompositeWeights<f64>;
pub type Group = curation::GenerationGroup<f64>;
pub type Dataset = trainer::TrainingSet<f64>;
