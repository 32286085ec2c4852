pub mod archive;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod generator;
pub mod graph;
pub mod imaging;
pub mod inversion;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
