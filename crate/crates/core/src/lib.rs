pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod diagnostics;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod priors;
pub mod evaluation;
pub mod flow;
pub mod spatial_model;
pub mod synth_data;

pub use error::{Error, Result};
