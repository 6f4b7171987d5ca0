//! Post-hoc out-of-distribution detection from attribution-gradient
//! abnormality.
//!
//! The crate bundles a small CNN engine with reverse-mode differentiation to
//! intermediate feature maps ([`tape`], [`model`]), the GAIA-Z and GAIA-A
//! scorers built on those gradients ([`gaia`]), output-space baselines
//! ([`baseline`]), and detection metrics with a benchmark runner
//! ([`metrics`], [`scores`], [`benchmark`]).

pub mod archive;
pub mod baseline;
pub mod benchmark;
pub mod cli;
pub mod detector;
pub mod error;
pub mod gaia;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scores;
pub mod tape;
pub mod tensor;

pub use archive::{Archive, SampleBatch, WeightArchive};
pub use detector::Detector;
pub use error::{Error, Result};
pub use gaia::{AbnormalityMatrix, Decision, Fusion, Method, ScorerConfig};
pub use graph::ModelGraph;
pub use metrics::DetectionMetrics;
pub use model::{ForwardPass, Model};
pub use tape::{Tape, TapGradients, Var};
pub use tensor::{Scalar, Tensor};
