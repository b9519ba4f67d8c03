//! Progressive tri-modal token pooling transformer.
//!
//! Visual and acoustic token sequences are pooled to `K` tokens each,
//! conditioned on summaries of the other modalities, before they reach
//! their transformer encoders. The crate also carries the numeric kernel
//! it runs on, featurization, a synthetic data generator, training and the
//! complexity benchmarks.

pub mod bench;
pub mod checks;
pub mod config;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod featurization;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pooling;
pub mod seed;
pub mod synth;
pub mod train;
pub mod variants;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, SampleInput};
pub use variants::{variant, Variant, VariantRegistry, Wiring};
