//! Tensor kernels and the U-Net segmentation model.

pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use tensor::Tensor;
pub use unet::{init_model, ForwardCache, ModelParameters, ParamEntry, UNet, UNetConfig};
