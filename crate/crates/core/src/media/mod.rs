//! Clip data types, frame-directory I/O and reference quality metrics.

mod clip;
pub mod io;
mod metrics;

pub use clip::{ClipMeta, ColorSpace, Frame, FrameClip, MediaError};
pub use metrics::{clip_quality, psnr, psnr_frames, ssim, QualityScore, SSIM_WINDOW};
