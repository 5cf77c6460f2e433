pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod owlqn;
pub mod scalar;
pub mod splits;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ModelParamsF64 = losses::ModelParams<f64>;
pub type ProblemF64 = losses::Problem<f64>;
pub type FeatureMatrixF64 = features::FeatureMatrix<f64>;
pub type TrainedModelF64 = model::TrainedModel<f64>;
pub type ModelParamsF32 = losses::ModelParams<f32>;
pub type ProblemF32 = losses::Problem<f32>;
