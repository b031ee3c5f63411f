pub mod biasmetrics;
pub mod classify;
pub mod dataset;
pub mod debias;
pub mod detect;
pub mod error;
pub mod features;
pub mod geometry;
pub mod parallel;
pub mod pipeline;
pub mod raster;
pub mod store;
pub mod synthgen;
pub mod weaksup;

pub use error::{Error, Result};
