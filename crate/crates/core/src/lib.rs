//! Desk-scale simulator of federated soft-prompt tuning.
//!
//! A soft prompt is trained across simulated clients against a frozen
//! backbone ([`federated`]), then fine-tuned per client ([`personalize`]),
//! while [`eval`] tracks how local (personalization) and global (robustness)
//! scores trade off. Client populations come from a synthetic task
//! hierarchy with controllable heterogeneity ([`data`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the rest of the tooling uses.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod federated;
pub mod numerics;
pub mod optim;
pub mod personalize;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = numerics::Matrix<f64>;
pub type Prompt = backbone::Prompt<f64>;
pub type FrozenBackbone = backbone::FrozenBackbone<f64>;
pub type BackboneParams = backbone::BackboneParams<f64>;
pub type TaskUniverse = data::TaskUniverse<f64>;
pub type AdamState = optim::AdamState<f64>;
pub type OptimizerState = optim::OptimizerState<f64>;
pub type TrainResult = federated::TrainResult<f64>;
pub type ClientTrajectory = personalize::ClientTrajectory<f64>;
pub type SuiteResult = personalize::SuiteResult<f64>;

pub type Matrix32 = numerics::Matrix<f32>;
pub type Prompt32 = backbone::Prompt<f32>;
pub type FrozenBackbone32 = backbone::FrozenBackbone<f32>;
