//! GAIT: unpaired image-to-image translation with a Sobel gradient-adjustment
//! loss layered on a CycleGAN-style objective.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`tape`]). Inner loops are data-parallel through [`exec`] when the
//! `parallel` feature is on, with bit-identical results either way.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod gradient_adjustment;
pub mod kernels;
pub mod kid;
pub mod losses;
pub mod networks;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use kernels::Padding;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
