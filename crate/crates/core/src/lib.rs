//! Interpretable student clustering through individualized feature selection.
//!
//! The pipeline turns clickstream logs into weekly behavioral time series,
//! trains a feature-gating predictor of pass/fail outcomes, extracts a binary
//! importance mask per student, and clusters students using only the series
//! their own mask marks as important.
//!
//! Stages, in order:
//!
//! - [`ingest`]: event CSV parsing, week bucketing, sessionization
//! - [`features`]: weekly feature extraction and unit-norm scaling
//! - [`nn`]: dense layers, BiLSTM, Gumbel-sigmoid gates, losses, Adam
//! - [`gating`]: the gated predictor, its training loop, mask extraction
//! - [`clustering`]: masked distances, Gaussian kernel, spectral clustering
//! - [`analysis`]: per-cluster importance, value distributions, pass rates
//! - [`synth`]: planted-archetype synthetic courses
//! - [`pipeline`]: config-driven stage orchestration with stamped artifacts

pub mod analysis;
pub mod clustering;
pub mod config;
pub mod features;
pub mod gating;
pub mod ingest;
pub mod nn;
pub mod numfmt;
pub mod pipeline;
pub mod synth;

pub use analysis::ClusterReport;
pub use clustering::{ClusterAssignment, DistanceMatrix, SimilarityMatrix};
pub use config::PipelineConfig;
pub use features::{FeatureCube, FeatureRegistry};
pub use gating::{GatingModel, MaskMatrix, TrainConfig, TrainHistory};
pub use ingest::{CourseSchedule, Event, EventKind, EventLog, Session};
