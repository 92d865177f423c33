//! Invariant learning with inferred environments.
//!
//! IRMv1 training, environment inference by penalty maximisation, the
//! repeated-inference loop with majority-environment retraining, synthetic
//! benchmarks and mutual-information diagnostics.

pub mod data;
pub mod datagen;
pub mod envinfer;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod pipelines;
pub mod rng;

pub use data::{Dataset, EnvPartition, Labels, Meta, Task};
pub use error::{Error, Result};
pub use models::{Model, ModelSpec, OptimSpec};
pub use rng::RngSeed;
