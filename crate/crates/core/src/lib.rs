//! Metric-learning losses, batch miners with easy positive sampling, and an
//! exact expected-loss framework for embeddings trained under noisy labels.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] stores embeddings and computes squared distances, neighbor
//!   orders and set diameters.
//! * [`losses`] evaluates contrastive, triplet, margin and multi-similarity
//!   losses together with their analytic gradients.
//! * [`mining`] builds P×K batches and expands them into tuples, including
//!   easy positive sampling.
//! * [`noisy`] holds the noisy-label model, closed-form expected objectives,
//!   the brute-force enumeration oracle and the reference embeddings.
//! * [`verify`] runs the numerical checks of the collapse and non-collapse
//!   results on top of [`noisy`] and [`trainer`].
//! * [`encoder`], [`trainer`], [`metrics`] and [`data`] provide the stochastic
//!   training pipeline; [`experiment`] wires them behind a JSON config.
//!
//! With the default `parallel` feature the per-anchor and per-query loops run
//! on rayon. Reductions always happen in index order so results are bitwise
//! identical with and without the feature.

pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod noisy;
pub mod par;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{DistanceMatrix, EmbeddingSet, NeighborOrder};
