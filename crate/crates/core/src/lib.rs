//! Streaming continual segmentation bench.
//!
//! The crate implements a self-contained study of *online domain-incremental
//! continual learning* for semantic segmentation, small enough to run on a
//! laptop CPU yet faithful to the protocol used on real driving data:
//!
//! * [`domains`] — procedural generators for labeled 32x32 street-scene
//!   images. Four "real" domains share one 19-class label space and differ in
//!   palette, texture, class frequencies, and weather; two "simulator" domains
//!   render from their own larger label spaces.
//! * [`labelspace`] — total maps from a simulator's label space onto the
//!   shared target space (unmappable classes drop to the ignore index).
//! * [`tensor`] — the f64 tensor kernel: same-padded convolution, ReLU,
//!   masked softmax cross-entropy, SGD, and a finite-difference checker.
//!   Every gradient in the crate is hand-derived and checked numerically.
//! * [`model`] — a small fully-convolutional per-pixel classifier with
//!   explicit forward/backward passes, snapshots, and value-exact
//!   checkpoints.
//! * [`stream`] — the online protocol: batches arrive once, the learner gets
//!   a fixed budget of `N` updates per batch, and an auditor verifies both
//!   the budget and that no past batch is retained by the engine.
//! * [`strategies`] — the learners: naive tuning, EWC, MAS, LwF, experience
//!   replay, an optional simulated-data regularizer that can wrap any of
//!   them, simulator pretraining, and an offline supervised upper bound.
//! * [`metrics`] — confusion matrices, mIoU, and transfer matrices with
//!   backward/forward-transfer summaries.
//! * [`config`] / [`record`] / [`experiment`] / [`report`] — the experiment
//!   harness: flat-text configs, deterministic JSON run records, named
//!   presets, grid sweeps, summary tables, and transfer-matrix heatmaps.
//!
//! Determinism is a hard requirement throughout: a run is a pure function of
//! its configuration (including seeds), and repeated runs must produce
//! byte-identical run records.

#![forbid(unsafe_code)]

pub mod config;
pub mod domains;
pub mod error;
pub mod experiment;
pub mod labelspace;
pub mod metrics;
pub mod model;
pub mod record;
pub mod report;
pub mod rng;
pub mod strategies;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
