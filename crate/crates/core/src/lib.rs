//! Segmentation engine for visceral (VAT) and subcutaneous (SAT) adipose
//! tissue in water-fat MRI.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode
//!   differentiation graph with the conv-net primitives.
//! - [`nn`]: the 2D U-Net and the anisotropic 3D V-Net, plus checkpoints.
//! - [`train`]: losses, Adam, training loop, patient-level folds.
//! - [`preprocess`]: contrast adjustment, channel assembly, padding, masking.
//! - [`io`]: the MVF1 volume format, study manifests, synthetic phantoms.
//! - [`eval`]: dice, depot volumes, volume errors, aggregate reports.
//! - [`pipeline`]: run configs, prediction, and the cross-validation driver.

pub mod autodiff;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Var};
pub use tensor::{DType, Float, Tensor, TensorError};
