//! Multi-scale super-resolution toolkit: a small NCHW tensor engine with
//! reverse-mode differentiation, residual/dense network builders, Adam
//! training, PSNR/SSIM evaluation, self-ensemble and tiled inference, and
//! dataset manifests with bit-exact checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod image_io;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
