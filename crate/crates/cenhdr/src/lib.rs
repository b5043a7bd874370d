//! CEN-HDR: a computationally efficient neural network for multi-exposure
//! high dynamic range imaging.
//!
//! The crate bundles everything needed to run and study the network on a CPU:
//!
//! - [`tensor`] / [`ops`] / [`tape`]: a minimal NCHW kernel layer with
//!   reverse-mode differentiation,
//! - [`model`]: the network graph (encoder, spatial-channel reference
//!   attention, merger, sub-pixel decoder) plus weight container I/O,
//! - [`pipeline`] / [`image_io`]: LDR ingestion, gamma projection, μ-law tone
//!   mapping and file formats,
//! - [`training`]: patch-based knowledge-distillation training,
//! - [`metrics`]: PSNR / μ-PSNR / SSIM / μ-SSIM evaluation,
//! - [`profiler`]: parameter/MAC accounting and the runtime benchmark.

pub mod graph;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod profiler;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod weights_io;

pub use tensor::{Element, Shape, Tensor, TensorError, TensorOf};
