//! Robustness experiments for 3D brain-tumour segmentation: a small autodiff
//! engine, a residual 3D U-Net, Dice losses, gradient-sign attacks, defenses,
//! and paired statistical evaluation.

pub mod attacks;
pub mod autodiff;
pub mod conv;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod segnet;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
