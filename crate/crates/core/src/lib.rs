//! Temporally consistent class activation maps for weakly supervised
//! segmentation of before/after video clips.

pub mod cli;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod preprocess;
pub mod spatial;
pub mod synthdata;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};
