//! Forecasting the evolution of brain connectivity graphs from a single
//! baseline acquisition.
//!
//! The pipeline, end to end:
//!
//! 1. [`cbt`] distills an independent population of baseline graphs into a
//!    connectional template — a fixed reference graph whose every connection
//!    is the most centered value observed across that population.
//! 2. [`gan`] trains an adversarial pair of edge-conditioned graph networks:
//!    a normalizer that maps any baseline graph toward the template while
//!    reconstructing it, and a discriminator that tells normalized graphs
//!    from the template itself. The normalizer's bottleneck yields a compact
//!    per-node embedding of each subject.
//! 3. [`selection`] compares subjects in embedding-residual space (distance
//!    from the template's own embedding) and predicts a test subject's
//!    follow-up graphs as the average of its top-k most similar training
//!    subjects' follow-ups.
//! 4. [`evaluation`] scores that forecast against simpler similarity
//!    baselines with a k-sweep and seeded cross-validation.
//! 5. [`synth`] generates clustered longitudinal populations with linear
//!    drift for desk-scale experiments, and [`io`] persists everything as
//!    deterministic plain text.
//!
//! All randomness flows through explicitly seeded generators; identical
//! config and seed reproduce identical artifacts bit for bit.

pub mod adam;
pub mod autodiff;
pub mod cbt;
pub mod evaluation;
pub mod gan;
pub mod graph;
pub mod io;
pub mod matrix;
pub mod selection;
pub mod synth;

pub use graph::{BrainGraph, GraphError, LongitudinalDataset, Split, SubjectTrajectory};
pub use matrix::Matrix;
