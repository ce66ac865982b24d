//! Experiment harness for the multi-granularity visual token pipeline:
//! synthetic scene/question datasets, one-model training on the full
//! oversampled token bundle, and evaluation under many test-time reduction
//! plans, compositions, and mask families — all without retraining.

pub mod config;
pub mod dataset;
pub mod driver;
pub mod experiment;
pub mod qa;
pub mod report;
