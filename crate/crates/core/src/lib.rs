pub mod error;
pub mod attention_mask;
pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod eval;
pub mod guidance;
pub mod numerics;

pub use error::{Error, Result};
