//! Desk-scale engine for cooperative multi-tool image restoration.
//!
//! The crate provides three pillars over a shared substrate of synthetic
//! degradations, classical differentiable restoration tools, and analytic
//! quality metrics:
//!
//! - exhaustive restoration-plan search with multi-metric selection and
//!   the out-of-scope / duplicate-tool analyzers ([`plansearch`]);
//! - reinforcement-learning plan generation trained with group-relative
//!   policy optimization against a multiplicative reward ([`planner`]);
//! - end-to-end co-training of composed tools under a progressive loss
//!   schedule, with gradients flowing through the whole chain ([`cotrain`]).
//!
//! Everything is deterministic given a seed: randomness comes from one
//! SplitMix64 stream, images are f64 grids in [0,1], and artifact formats
//! are bit-exact.

pub mod cotrain;
pub mod degrade;
pub mod error;
pub mod grad;
pub mod harness;
pub mod image;
pub mod io;
pub mod metrics;
pub mod planner;
pub mod plansearch;
pub mod prng;
pub mod tools;

pub use error::{Error, Result};
pub use image::Image;
pub use prng::Prng;
