//! Closed-loop single-image super-resolution toolkit.
//!
//! A dense-tensor engine with reverse-mode differentiation drives a pair of
//! networks: a primal upscaler and small dual downscalers whose
//! reconstructions of the input close the loop. The dual term doubles as a
//! handle on LR-only data, so pretrained models can be adapted to unknown
//! degradations. Degradation kernels, PSNR/SSIM scoring, a binary checkpoint
//! format, and a CLI round out the toolkit.
//!
//! Core math is generic over the scalar type ([`element::Element`], `f32` or
//! `f64`); the training pipeline and file formats run on `f32` (see the
//! aliases below).

pub mod cli;
pub mod degrade;
pub mod element;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use element::Element;
pub use error::{DrnError, Result};
pub use model::{DrnConfig, DrnModel, ForwardPass, Preset, TrackMode};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{AdaptConfig, DualScales, LossConfig, TrainConfig};

/// Single-precision tensor, the type the pipelines and file formats use.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor for oracles and tests that want headroom.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tape.
pub type Tape32 = Tape<f32>;
/// Single-precision model.
pub type Model32 = DrnModel<f32>;
