//! Diffusion-image detection by fusing frozen text/image embeddings with a
//! multi-spectral DCT channel-attention branch.

pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod mcaf;
pub mod nn;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, ImageTensor, Plane};
