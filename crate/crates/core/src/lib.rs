//! Semi-supervised multi-task intent classification over curation feedback.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod finetune;
pub mod heads;
pub mod model;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod selftrain;
pub mod tensor;

pub use error::{Error, Result};
