//! Deterministic simulator of platform ad delivery with Lift and A/B test
//! harnesses and covariate balance diagnostics.

pub mod assignment;
pub mod delivery;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod population;
pub mod rng;
pub mod scenarios;
pub mod special;

pub use error::{Error, Result};
