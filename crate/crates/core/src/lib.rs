//! Prevalence estimation from imperfect diagnostic tests.

pub mod error;
pub mod exact;
pub mod interface;
pub mod point;
pub mod resampling;
pub mod simulation;
pub mod stochastics;
pub mod weighted;

pub use error::{Error, Result};
