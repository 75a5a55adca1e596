//! Thompson sampling for count outcomes.
//!
//! Regression models for counts (Poisson, negative binomial and their
//! zero-inflated versions), Thompson-sampling agents built on their Laplace
//! posteriors, simulation environments, regret and off-policy evaluation,
//! and a seeded experiment harness. Everything is generic over the float
//! type; the aliases below fix it to `f64`.

// `!(x > 0)` is the NaN-rejecting form used throughout the validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod count_models;
pub mod environments;
pub mod evaluation;
pub mod harness;
pub mod linalg;
pub mod mrt;
pub mod scalar;

pub use count_models::ModelKind;

pub type FeatureVector = count_models::FeatureVector<f64>;
pub type Dataset = count_models::Dataset<f64>;
pub type ModelParams = count_models::ModelParams<f64>;
pub type PriorSpec = count_models::PriorSpec<f64>;
pub type FitOptions = count_models::FitOptions<f64>;
pub type FitResult = count_models::FitResult<f64>;
pub type AgentConfig = agents::AgentConfig<f64>;
pub type AgentState = agents::AgentState<f64>;
pub type Decision = agents::Decision<f64>;
