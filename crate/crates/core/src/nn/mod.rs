//! Layers and the composite blocks of the network.

pub mod blocks;
mod param;
pub mod registry;
pub mod upsample;

pub use blocks::{ConvBlock, ConvBottleneck, KanConvBlock, PatchEmbedding, TokenBlock};
pub use param::{Buffer, Module, Param};
pub use registry::Registry;
pub use upsample::Upsampler;
