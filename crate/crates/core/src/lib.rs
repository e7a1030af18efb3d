//! Few-shot data augmentation by interpolating DDIM inversions of a toy
//! conditional diffusion model.

pub mod concepts;
pub mod config;
pub mod datio;
pub mod ddim;
pub mod error;
pub mod evalharness;
pub mod interp;
pub mod nnet;
pub mod pipeline;
pub mod schedule;
pub mod stats;
pub mod synthesis;

pub use error::{Error, Result};
