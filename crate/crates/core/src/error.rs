use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("channel mismatch: layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("stride-2 convolution requires even spatial size, got {h}x{w}")]
    OddSpatialSize { h: usize, w: usize },
    #[error("depth_to_space needs channels divisible by {factor_sq}, got {channels}")]
    ChannelsNotDivisible { channels: usize, factor_sq: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("image too small: {h}x{w}, need at least {min}x{min}")]
    ImageTooSmall { h: usize, w: usize, min: usize },
    #[error("LR/HR size mismatch for '{id}': {lr_w}x{lr_h} vs {hr_w}x{hr_h}")]
    PairSizeMismatch {
        id: String,
        lr_w: u32,
        lr_h: u32,
        hr_w: u32,
        hr_h: u32,
    },
    #[error("unsupported image bit depth in {path}: only 8-bit images are accepted")]
    UnsupportedBitDepth { path: PathBuf },
    #[error("tile config invalid: {0}")]
    InvalidTileConfig(String),
    #[error("manifest error at {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("manifest entry '{0}' has no camera tag")]
    UntaggedEntry(String),
    #[error("checkpoint format version {got}, expected {expected}")]
    CheckpointVersion { got: u32, expected: u32 },
    #[error("checkpoint blob for parameter '{name}' is truncated: need {need} bytes, have {have}")]
    TruncatedBlob {
        name: String,
        need: usize,
        have: usize,
    },
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
