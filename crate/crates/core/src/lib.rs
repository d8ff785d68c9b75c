//! Cascaded lesion-region and vessel segmentation with feature-space graph
//! reasoning, boundary and shape auxiliary tasks, and Monte Carlo dropout
//! uncertainty weighting.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod migr;
pub mod mrgr;
pub mod nn;
pub mod pipeline;
pub mod uncertainty;

pub use error::{Error, Result};
