//! Persona-conditioned synthetic population generation.
//!
//! Agents are tables of mixed categorical and numerical attributes. Each agent
//! is paired with a persona text whose language-model embedding conditions a
//! generative backbone (a WGAN-GP with a projection critic, or a VAE with a
//! learned conditional prior). Marginal regularization keeps generated
//! univariate marginals close to the training data. Around the backbones sit
//! evaluation metrics, raking calibration and counterfactual interventions in
//! embedding and text space.

pub mod autodiff;
pub mod calibration;
pub mod checkpoint;
pub mod conditioning;
pub mod counterfactual;
pub mod embedding;
pub mod error;
pub mod gan;
pub mod marginal;
pub mod metrics;
pub mod nn;
pub mod persona;
pub mod pipeline;
pub mod population;
pub mod sampler;
pub mod schema;
pub mod toy;
pub mod vae;

pub use error::{Error, Result};
pub use population::{
    decode, encode, load_population, split_population, stratified_sample, Column, EncodedBatch,
    Population,
};
pub use schema::{fit_schema_stats, load_schema, AttributeKind, AttributeSchema, AttributeSpec};
pub use toy::{make_toy_population, ToyJointSpec};
