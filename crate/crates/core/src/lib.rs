//! Masked-diffusion sequence modeling over a toy vocabulary, conditioned on
//! synthetic audio through a semantic and an acoustic adapter.
//!
//! The crate covers the full loop: corpus synthesis, a curriculum of
//! freezing stages ending in variance-reduced preference optimization, and
//! a block-wise diffusion decoder with confidence-factor parallelism.

pub mod audiofront;
pub mod backbone;
pub mod datagen;
pub mod decode;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod pipeline;
pub mod state;
pub mod substrate;
pub mod vrpo;

pub use backbone::{TokenId, TokenSeq, Vocab};
pub use error::{Error, Result};
pub use state::{ModelConfig, ModelState};
