//! Directed species association networks from site × species community data.
//!
//! Each species carries two latent vectors: a *response* embedding describing
//! how it reacts to its biotic context and an *effect* embedding describing how
//! it shifts the abundance of co-occurring species. The directed association
//! matrix factorizes as `A = P Qᵀ`. Abundances are modelled with a conditional
//! exponential-family likelihood that aggregates a per-species habitat model
//! with the biotic predictor under one of three modes (additive,
//! multiplicative, hierarchical).
//!
//! The crate also ships the two community simulators and the evaluation suite
//! used to validate the method against known networks.

pub mod associations;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod model;
pub mod network;
pub mod rng;
pub mod selection;
pub mod sim_community;
pub mod sim_foodweb;

pub use associations::{BioticContextSpec, EmbeddingPair};
pub use data::{CommunityData, PreprocessSpec};
pub use distributions::{FamilyKind, ResponseFamily};
pub use error::{Error, Result};
pub use inference::TrainConfig;
pub use model::{AggregationMode, FittedModel, HabitatModel, ModelSpec};
