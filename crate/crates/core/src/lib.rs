//! Plausibility-aware action anticipation at desk scale.
//!
//! Mines temporal and verb-noun constraints from action-sequence corpora,
//! builds counterfactual (implausible) targets, computes the contrastive
//! plausibility loss and the position-weighted repetition loss with exact
//! gradients, trains a tiny autoregressive next-action model and evaluates
//! it with edit-distance, recall, BLEU, repetition and compliance metrics.
//!
//! With the default `parallel` feature, per-sequence and per-example work
//! runs on rayon; without it the same code runs sequentially. Results are
//! identical either way.

pub mod cli;
pub mod constraints;
pub mod corpus;
pub mod counterfactual;
pub mod embedding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod toymodel;

pub use error::{Error, Result};
