//! Tape-based autodiff plus the two restoration networks (DET for tilt
//! removal, DEB for de-blurring) and their optimization primitives. Math is
//! generic over the scalar type: gradient checks instantiate `f64`, runtime
//! paths typically use `f32`.

pub mod blocks;
pub mod checkpoint;
pub mod deblur;
pub mod detilt;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    ConfigError(String),
    #[error("dimensions must be even, got {h}x{w}")]
    OddDimensions { h: usize, w: usize },
    #[error("unsupported input geometry: {0}")]
    ShapeError(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {reason}")]
    Io { path: std::path::PathBuf, reason: String },
}

pub type DetNetF32 = detilt::DetNet<f32>;
pub type DetNetF64 = detilt::DetNet<f64>;
pub type DebNetF32 = deblur::DebNet<f32>;
pub type DebNetF64 = deblur::DebNet<f64>;
