//! Evaluation, matching and data-preparation tooling for generalised
//! medical phrase grounding: mapping an (image, phrase) pair to a set of
//! zero, one or many scored boxes.

pub mod analysis;
pub mod cleanup;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod matching;
pub mod metrics;
pub mod postprocess;
pub mod setloss;

pub use error::{Error, Result};
