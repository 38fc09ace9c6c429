//! Interpretable multivariate time-series classification through the
//! evolution of highly activated input periods of a trained 1D CNN.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`dataset`]: load, normalize and split series; build channel-masked input sets.
//! 2. [`nn`]: train the CNN and read per-layer activations and receptive fields.
//! 3. [`mhap`]: threshold activations and cut out highly activated input periods.
//! 4. [`kshape`]: cluster the periods of each layer by shape.
//! 5. [`evograph`]: link clusters by temporal succession and across layers.
//! 6. [`embedding`]: embed graph nodes with weighted random walks and skip-gram.
//! 7. [`representation`]: sum node vectors per time segment into sample features.
//! 8. [`gbdt`]: classify the features with boosted trees.
//!
//! [`pipeline`] strings the stages together and persists them through [`artifacts`].

pub mod artifacts;
pub mod container;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod evograph;
pub mod gbdt;
pub mod kshape;
pub mod mhap;
pub mod nn;
pub mod pipeline;
pub mod representation;
pub mod seed;
pub mod synthetic;
pub mod util;

pub use error::{Error, Result};
