//! Deterministic simulator for personalized decentralized federated learning
//! with LSH-based peer similarity, rank-based trust scores, weighted top-N
//! neighbor selection, reference-set knowledge distillation, and
//! commit-and-reveal ranking announcements.

pub mod adversary;
pub mod announce;
pub mod data;
pub mod error;
pub mod experiments;
pub mod lsh;
pub mod model;
pub mod protocol;
pub mod ranking;
pub mod rng;
pub mod selection;
pub mod sim;

pub use error::{Error, Result};

/// Client identifier; clients are numbered `0..num_clients`.
pub type ClientId = u32;
