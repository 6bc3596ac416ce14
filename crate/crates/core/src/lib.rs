pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod grad;
pub mod introspect;
pub mod pipeline;
pub mod pretrain;
pub mod promptgen;

pub use error::{Error, Result};
