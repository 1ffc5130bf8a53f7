pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod databus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reverb;
pub mod stft;
pub mod training;

pub use error::{Error, Result};
