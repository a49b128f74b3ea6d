//! Implicit neural representation toolkit: image and radiance-field INRs,
//! quality-controlled fitting, learnable coordinate tokenizers,
//! differentiable augmentation and photometric pose refinement.

pub mod difaug;
pub mod downstream;
pub mod error;
pub mod image;
pub mod inr2d;
pub mod inrz;
pub mod manifest;
pub mod nerf;
pub mod qc;
pub mod scene;
pub mod seed;
pub mod synth;
pub mod tokenizer;

pub use error::{CoreError, Result};
pub use image::{psnr, ImageGrid};
pub use inr2d::{fit_image, grid_coords, Arch, FitConfig, ImageFitter, Inr2d, Layer, NormConstants};
