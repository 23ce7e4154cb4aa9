pub mod baselines;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evalharness;
pub mod matrix;
pub mod numerics;
pub mod policy;
pub mod predictor;
pub mod rewards;
pub mod scalar;
pub mod synthgen;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub use config::RunConfig;

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Dataset32 = datamodel::Dataset<f32>;
pub type Dataset64 = datamodel::Dataset<f64>;
pub type Predictor32 = predictor::PredictorModel<f32>;
pub type Predictor64 = predictor::PredictorModel<f64>;
