//! Buyer persona discovery from e-commerce clickstreams.
//!
//! The crate turns raw clickstream events into normalized buyer feature
//! vectors, learns a discrete persona codebook with a behavior-aware VQ-VAE,
//! assigns persona tokens, and evaluates the resulting codebook with
//! clustering, distribution-recovery, separation, and alignment statistics.
//!
//! Module map:
//!
//! * [`events`]: raw event schema, sessionization, buyer–shop aggregation,
//!   funnel strata, intent strength, product catalog files.
//! * [`features`]: normalization state and the fixed feature-vector layout.
//! * [`synth`]: seeded synthetic populations with planted archetypes.
//! * [`nn`]: dense networks with hand-written reverse-mode gradients and Adam.
//! * [`codebook`]: k-means++ init, quantization, EMA updates, dead-code revival.
//! * [`objective`]: reconstruction, commitment, InfoNCE with gated positive
//!   mining, auxiliary heads and their label binning.
//! * [`trainer`]: dataset sampling, the training loop, and the MiniBatch
//!   k-means baseline.
//! * [`population`]: token assignment, store distributions, stratum mixing,
//!   JS divergence, store feature reconstruction.
//! * [`metrics`]: cluster quality, alignment, separation statistics, and the
//!   persona-policy simulator.
//! * [`traces`]: SFT trace records with template goals.
//! * [`artifact`]: the versioned model container.
//! * [`pipeline`]: end-to-end orchestration shared by the CLI and tests.

pub mod artifact;
pub mod codebook;
pub mod config;
pub mod error;
pub mod events;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod pipeline;
pub mod population;
pub mod rng;
pub mod synth;
pub mod traces;
pub mod trainer;

pub use error::{Error, Result};
