//! Deterministic federated-learning simulator with prioritized multi-criteria
//! client weighting.
//!
//! A run partitions a dataset over simulated clients, then repeats rounds of
//! cohort selection, local SGD, criteria measurement and weighted model
//! aggregation. Clients are weighted by a score over normalized criteria
//! (dataset size, label diversity, model divergence, class balance, sharpness)
//! arranged in priority order.

pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod learner;
pub mod metrics;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
