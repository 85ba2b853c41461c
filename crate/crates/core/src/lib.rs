//! Supervised GAN watermarking.
//!
//! A pre-trained watermark decoder is frozen and used to steer a generator
//! so that every image it samples carries the owner's bit string. The crate
//! bundles the codec, a small GAN, a differentiable processing layer,
//! ownership verification and the evaluation harness, on top of a compact
//! reverse-mode tensor engine.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod bits;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gan;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod jpeg;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use bits::{bit_accuracy, hard_threshold, BitString, SoftBits};
pub use error::{Error, Result};
pub use image::{Image, ImageBatch};
pub use rng::Rng;
pub use tensor::Tensor;
pub use augment::{AugmentationConfig, Operator};
pub use codec::{CodecCheckpoint, CodecConfig, FrozenDecoder};
pub use embed::{EmbedConfig, WatermarkedGanCheckpoint};
pub use eval::{SweepRow, SweepSpec};
pub use gan::{GanCheckpoint, GanConfig};
pub use verify::{Decision, VerificationReport, VerifyConfig};
