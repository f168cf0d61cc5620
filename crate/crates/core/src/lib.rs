pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pretrain;

pub use error::{Error, Result};
