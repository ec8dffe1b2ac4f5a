//! Graphic-score pages to long-form audio: vision prompts, text conditioning,
//! outpainted latent diffusion and overlap-add decoding.

pub mod audio;
pub mod checkpoint;
pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod fsutil;
pub mod pipeline;
pub mod prompts;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{LatentShape, LatentTensor};
