pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod pretrain;
pub mod spectral;

pub use error::{Error, Result};
