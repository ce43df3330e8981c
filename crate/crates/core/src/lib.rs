//! Partial-label segmentation training: standard, adaptive and marginal cross-entropy,
//! the label-dropout transform, a compact U-Net trained with Nesterov SGD, Dice and
//! Wilcoxon evaluation, and a synthetic multi-domain cone-image generator.

pub mod dropout;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use types::{validate_sample, ClassVocabulary, Grid, Image, LabelMap, PresenceVector, SegmentationSample, Violation};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type UNet32 = nn::UNet<f32>;
pub type UNet64 = nn::UNet<f64>;
