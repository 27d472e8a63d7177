pub mod attributes;
pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod downstream;
pub mod embedding;
pub mod enhancer;
pub mod error;
pub mod extractor;
pub mod fsutil;
pub mod gradcheck;
pub mod optim;
pub mod prompts;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
