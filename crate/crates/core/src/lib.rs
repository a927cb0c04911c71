//! Compound density network for joint imputation and risk prediction on
//! incomplete multivariate time series.
//!
//! A GRU reads the prefilled journey and drives a Gaussian-mixture imputer;
//! an attention block down-weights imputed values with a large mixture
//! variance; a second mixture head turns the attention-pooled journey into a
//! class probability distribution. Every component is generic over the
//! scalar type; the aliases below fix it to `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod imputer;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod ran;
pub mod rng;
pub mod scalar;
pub mod training;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{build_variant, ModelConfig, Variant};
pub use scalar::Scalar;
pub use training::{train, TrainConfig};

/// Double-precision model.
pub type Cdnet = model::CdnetModel<f64>;
/// Double-precision tensor.
pub type Tensor64 = numerics::Tensor<f64>;
/// Double-precision parameter store.
pub type Params64 = numerics::ParamStore<f64>;
/// Outcome of double-precision training.
pub type TrainOutcome64 = training::TrainOutcome<f64>;
