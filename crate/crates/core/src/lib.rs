//! Closed-loop feature engineering for batch-job runtime prediction.
//!
//! The crate models the full loop: a synthetic workload corpus stands in for
//! a production job log, a typed tool registry exposes read-only probes over
//! that corpus, a template planner proposes feature extraction programs in a
//! small sandboxed language, safety gates reject programs that would leak the
//! prediction target, a materializer turns gated programs into training
//! matrices, and gradient-boosted / ridge models trained on those matrices
//! feed an evaluation loop that refines the feature set over iterations.
//! Trained artifacts are packaged as verifiable bundles and drive a
//! cost-minimizing cluster-configuration chooser.
//!
//! Everything is deterministic under an explicit seed: corpus generation,
//! model training, iteration logs, and bundle bytes all replay exactly.

pub mod analyzer;
pub mod corpus;
pub mod evaluation;
pub mod gates;
pub mod dsl;
pub mod knowledge;
pub mod lifecycle;
pub mod materializer;
pub mod modeling;
pub mod seed;
pub mod toolchain;
